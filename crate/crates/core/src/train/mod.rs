//! Toy copy and reverse training at matched parameter budgets.

pub mod compare;
pub mod model;
pub mod optim;
pub mod run;
pub mod task;

pub use compare::{
    compare, report, summarize, write_comparison_csv, ComparisonRow, Summary, COMPARISON_HEADER,
};
pub use model::{
    greedy_decode, greedy_decode_batch, Arch, Model, ModelConfig, ModelCount, ModelParams,
};
pub use optim::{adam_step, inverse_sqrt_lr, AdamConfig, AdamState};
pub use run::{
    evaluate, label_smoothed_cross_entropy, loss_and_gradients, meets_threshold, train,
    train_model, write_eval_jsonl, EvalEvent, RunRecord, TrainConfig, TrainedRun,
};
pub use task::{generate_task, Dataset, Example, TaskKind, TaskSpec};
