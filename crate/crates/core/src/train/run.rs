//! Training loop, evaluation and run records.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::graph::smoothed_cross_entropy_value;
use crate::tensor::{Graph, Matrix, RngState};
use crate::train::model::{
    argmax_rows, greedy_decode_batch, logits, logits_on_graph, shift_right, Arch, Model,
    ModelConfig, ModelCount,
};
use crate::train::optim::{adam_step, inverse_sqrt_lr, AdamConfig, AdamState};
use crate::train::task::{generate_task, Example, TaskKind, TaskSpec};

/// Copy succeeds at this validation token accuracy.
pub const COPY_TOKEN_THRESHOLD: f64 = 0.99;
/// Reverse succeeds at this validation sequence accuracy under greedy decoding.
pub const REVERSE_SEQUENCE_THRESHOLD: f64 = 0.95;

const EVAL_CHUNK: usize = 128;

/// Mean over positions of the cross-entropy against a target that puts
/// `1 - ε` on the gold token and `ε / (V - 1)` on every other token.
pub fn label_smoothed_cross_entropy(
    logits: &Matrix,
    targets: &[usize],
    smoothing: f64,
) -> Result<f64> {
    smoothed_cross_entropy_value(logits, targets, smoothing).map(|(loss, _)| loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub warmup: u64,
    /// Multiplies the scheduled learning rate.
    pub lr_scale: f64,
    pub label_smoothing: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_interval: usize,
    /// Stops at the first evaluation that meets the task threshold.
    pub stop_at_threshold: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            warmup: 400,
            lr_scale: 1.0,
            label_smoothing: 0.1,
            batch_size: 64,
            max_steps: 3000,
            eval_interval: 100,
            stop_at_threshold: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!(
                "label smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if !(self.lr_scale > 0.0) {
            return Err(Error::config(format!(
                "lr_scale must be positive, got {}",
                self.lr_scale
            )));
        }
        if self.warmup == 0 || self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::config(
                "warmup, batch size and eval interval must be at least 1",
            ));
        }
        Ok(())
    }
}

/// One validation pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEvent {
    pub step: usize,
    /// Teacher-forced label-smoothed loss.
    pub loss: f64,
    pub token_acc: f64,
    pub seq_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub arch: Arch,
    pub task: TaskKind,
    pub seed: u64,
    pub data_seed: u64,
    pub param_count: ModelCount,
    /// Training-batch loss after each step, starting at step 1.
    pub losses: Vec<f64>,
    pub evals: Vec<EvalEvent>,
    pub steps: usize,
    pub steps_to_threshold: Option<usize>,
    pub final_eval: EvalEvent,
    /// Not serialized, so output files stay reproducible.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn threshold_met(&self) -> bool {
        self.steps_to_threshold.is_some()
    }
}

pub struct TrainedRun {
    pub model: Model,
    pub record: RunRecord,
}

/// Whether `eval` meets the success threshold of `task`.
pub fn meets_threshold(task: TaskKind, eval: &EvalEvent) -> bool {
    match task {
        TaskKind::Copy => eval.token_acc >= COPY_TOKEN_THRESHOLD,
        TaskKind::Reverse => eval.seq_acc >= REVERSE_SEQUENCE_THRESHOLD,
    }
}

fn check_pairing(model: &ModelConfig, task: &TaskSpec) -> Result<()> {
    let want_decoder = task.kind == TaskKind::Reverse;
    if model.decoder != want_decoder {
        return Err(Error::config(format!(
            "the {} task needs {} model",
            task.kind,
            if want_decoder {
                "an encoder-decoder"
            } else {
                "an encoder-only"
            }
        )));
    }
    Ok(())
}

/// Source rows, decoder inputs and flattened targets.
type BatchTokens = (Vec<Vec<usize>>, Option<Vec<Vec<usize>>>, Vec<usize>);

fn batch_tensors(examples: &[&Example]) -> BatchTokens {
    let source = examples.iter().map(|e| e.input.clone()).collect();
    let dec_in = examples.iter().map(|e| shift_right(&e.target)).collect();
    let targets = examples
        .iter()
        .flat_map(|e| e.target.iter().copied())
        .collect();
    (source, Some(dec_in), targets)
}

/// Training loss of `batch` and the gradient of every named model tensor.
pub fn loss_and_gradients(
    model: &Model,
    batch: &[&Example],
    smoothing: f64,
) -> Result<(f64, Vec<(String, Matrix)>)> {
    let (source, dec_in, targets) = batch_tensors(batch);
    let dec_in = if model.config.decoder { dec_in } else { None };
    let mut g = Graph::new();
    let vars = model.params.map(|m| g.param(m.clone()));
    let logits = logits_on_graph(&mut g, model, &vars, &source, dec_in.as_deref())?;
    let loss = g.smoothed_cross_entropy(logits, &targets, smoothing)?;
    let value = g.value(loss).get(0, 0);
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let grads = g.backward(loss)?;
    let named = vars
        .tensors()
        .into_iter()
        .map(|(name, v)| (name, grads.wrt(*v)))
        .collect();
    Ok((value, named))
}

/// Loss and accuracies on `examples`; reverse accuracies use greedy decoding.
pub fn evaluate(
    model: &Model,
    task: TaskKind,
    examples: &[Example],
    smoothing: f64,
    step: usize,
) -> Result<EvalEvent> {
    let (mut loss_sum, mut correct, mut seq_correct, mut tokens) = (0.0, 0usize, 0usize, 0usize);
    for chunk in examples.chunks(EVAL_CHUNK) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let (source, dec_in, targets) = batch_tensors(&refs);
        let dec_in = if model.config.decoder { dec_in } else { None };
        let l = logits(model, &source, dec_in.as_deref())?;
        loss_sum += label_smoothed_cross_entropy(&l, &targets, smoothing)? * targets.len() as f64;
        let predicted: Vec<Vec<usize>> = match task {
            TaskKind::Copy => {
                let flat = argmax_rows(&l);
                flat.chunks(source[0].len())
                    .map(<[usize]>::to_vec)
                    .collect()
            }
            TaskKind::Reverse => greedy_decode_batch(model, &source, chunk[0].target.len())?,
        };
        for (e, p) in chunk.iter().zip(&predicted) {
            let hits = e.target.iter().zip(p).filter(|(a, b)| a == b).count();
            correct += hits;
            tokens += e.target.len();
            if hits == e.target.len() {
                seq_correct += 1;
            }
        }
    }
    Ok(EvalEvent {
        step,
        loss: loss_sum / tokens as f64,
        token_acc: correct as f64 / tokens as f64,
        seq_acc: seq_correct as f64 / examples.len() as f64,
    })
}

/// Trains one model and keeps it.
///
/// Seed streams: `seed.split(0)` initializes the model, `seed.split(1)` draws
/// batches; the task's own seed generates the data.
pub fn train_model(
    model_cfg: &ModelConfig,
    task: &TaskSpec,
    cfg: &TrainConfig,
) -> Result<TrainedRun> {
    cfg.validate()?;
    check_pairing(model_cfg, task)?;
    let started = Instant::now();
    let data = generate_task(task)?;
    let root = RngState::new(cfg.seed);
    let mut model = Model::init(model_cfg, task.vocab, &mut root.split(0))?;
    let mut batch_rng = root.split(1);
    let mut adam = AdamState::new(model.params.tensors().into_iter().map(|(_, m)| m));

    let mut evals = vec![evaluate(
        &model,
        task.kind,
        &data.valid,
        cfg.label_smoothing,
        0,
    )?];
    let mut steps_to_threshold = meets_threshold(task.kind, &evals[0]).then_some(0);
    let mut losses = Vec::with_capacity(cfg.max_steps);
    let mut steps = 0;
    let stop_now = |s: Option<usize>| cfg.stop_at_threshold && s.is_some();

    while steps < cfg.max_steps && !stop_now(steps_to_threshold) {
        steps += 1;
        let batch: Vec<&Example> = (0..cfg.batch_size)
            .map(|_| &data.train[batch_rng.below(data.train.len() as u64) as usize])
            .collect();
        let (loss, grads) = loss_and_gradients(&model, &batch, cfg.label_smoothing)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step: steps, loss });
        }
        losses.push(loss);
        let grads: Vec<Matrix> = grads.into_iter().map(|(_, g)| g).collect();
        let lr = cfg.lr_scale * inverse_sqrt_lr(steps as u64, model_cfg.d_model, cfg.warmup);
        let mut params: Vec<&mut Matrix> = model
            .params
            .tensors_mut()
            .into_iter()
            .map(|(_, m)| m)
            .collect();
        adam_step(&mut params, &grads, &mut adam, &cfg.adam, lr)?;

        if steps % cfg.eval_interval == 0 || steps == cfg.max_steps {
            let ev = evaluate(&model, task.kind, &data.valid, cfg.label_smoothing, steps)?;
            if steps_to_threshold.is_none() && meets_threshold(task.kind, &ev) {
                steps_to_threshold = Some(steps);
            }
            evals.push(ev);
        }
    }
    let final_eval = *evals.last().expect("initial evaluation");
    let record = RunRecord {
        arch: model_cfg.arch,
        task: task.kind,
        seed: cfg.seed,
        data_seed: task.seed,
        param_count: model.param_count(),
        losses,
        evals,
        steps,
        steps_to_threshold,
        final_eval,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainedRun { model, record })
}

/// Trains one model and returns its record.
pub fn train(model_cfg: &ModelConfig, task: &TaskSpec, cfg: &TrainConfig) -> Result<RunRecord> {
    train_model(model_cfg, task, cfg).map(|r| r.record)
}

/// One JSON object per evaluation: `{step, loss, token_acc, seq_acc}`.
pub fn write_eval_jsonl(mut out: impl Write, record: &RunRecord) -> Result<()> {
    for ev in &record.evals {
        serde_json::to_writer(&mut out, ev)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_task(kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            vocab: 8,
            seq_len: 4,
            train_size: 200,
            valid_size: 64,
            seed: 1,
        }
    }

    fn tiny_model(arch: Arch, decoder: bool) -> ModelConfig {
        ModelConfig {
            layers: 1,
            d_model: 8,
            heads: 2,
            ..ModelConfig::small(arch, decoder)
        }
    }

    #[test]
    fn smoothing_hand_cases() {
        let zero = Matrix::zeros(1, 2);
        assert!(
            (label_smoothed_cross_entropy(&zero, &[0], 0.1).unwrap() - 2f64.ln()).abs() < 1e-15
        );
        let l = Matrix::from_rows(&[[1.0, -0.5, 2.0]]).unwrap();
        let lse = (1f64.exp() + (-0.5f64).exp() + 2f64.exp()).ln();
        let plain = lse - 1.0;
        assert!((label_smoothed_cross_entropy(&l, &[0], 0.0).unwrap() - plain).abs() < 1e-14);
        let uniform = Matrix::filled(2, 5, 0.3);
        for eps in [0.0, 0.1, 0.7] {
            let v = label_smoothed_cross_entropy(&uniform, &[1, 4], eps).unwrap();
            assert!((v - 5f64.ln()).abs() < 1e-14);
        }
        assert!(label_smoothed_cross_entropy(&l, &[3], 0.1).is_err());
        assert!(label_smoothed_cross_entropy(&l, &[0], 1.0).is_err());
    }

    #[test]
    fn short_runs_are_deterministic() {
        let cfg = TrainConfig {
            max_steps: 6,
            eval_interval: 3,
            batch_size: 8,
            warmup: 4,
            ..TrainConfig::default()
        };
        for (kind, decoder) in [(TaskKind::Copy, false), (TaskKind::Reverse, true)] {
            let m = tiny_model(Arch::Macaron, decoder);
            let a = train(&m, &tiny_task(kind), &cfg).unwrap();
            let b = train(&m, &tiny_task(kind), &cfg).unwrap();
            assert_eq!(
                a,
                RunRecord {
                    wall_clock_secs: a.wall_clock_secs,
                    ..b
                }
            );
            assert_eq!(a.losses.len(), 6);
            assert_eq!(
                a.evals.iter().map(|e| e.step).collect::<Vec<_>>(),
                vec![0, 3, 6]
            );
            assert!(a.losses.iter().all(|l| l.is_finite()));
        }
    }

    #[test]
    fn pairing_is_enforced() {
        let cfg = TrainConfig {
            max_steps: 1,
            ..TrainConfig::default()
        };
        assert!(train(
            &tiny_model(Arch::Transformer, false),
            &tiny_task(TaskKind::Reverse),
            &cfg
        )
        .is_err());
        assert!(train(
            &tiny_model(Arch::Transformer, true),
            &tiny_task(TaskKind::Copy),
            &cfg
        )
        .is_err());
    }

    #[test]
    fn jsonl_layout() {
        let cfg = TrainConfig {
            max_steps: 2,
            eval_interval: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let r = train(
            &tiny_model(Arch::Transformer, false),
            &tiny_task(TaskKind::Copy),
            &cfg,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_eval_jsonl(&mut buf, &r).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("{\"step\":0,\"loss\":"));
        assert!(lines[2].contains("\"token_acc\":") && lines[2].ends_with('}'));
    }

    #[test]
    fn exploding_learning_rate_reports_divergence() {
        let cfg = TrainConfig {
            max_steps: 20,
            batch_size: 4,
            lr_scale: 1e300,
            ..TrainConfig::default()
        };
        let err = train(
            &tiny_model(Arch::Transformer, false),
            &tiny_task(TaskKind::Copy),
            &cfg,
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::Divergence { step, .. } if step >= 2),
            "{err}"
        );
    }
}
