//! Side-by-side runs of both architectures over tasks and seeds.
//!
//! The table reports metrics per architecture and never ranks them.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::train::model::{Arch, ModelConfig};
use crate::train::run::{train, RunRecord, TrainConfig};
use crate::train::task::{TaskKind, TaskSpec};

pub const COMPARISON_HEADER: &str = "arch,task,seed,steps_to_threshold,final_token_acc,param_count";

/// Large-scale translation context printed under every comparison report.
pub const REFERENCE_FOOTER: &str =
    "reference scale: IWSLT14 De-En BLEU 35.4 (Macaron) vs 34.4 (Transformer); \
     toy-task numbers above are not comparable and rank nothing";

pub const MIN_SEEDS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub arch: Arch,
    pub task: TaskKind,
    pub seed: u64,
    pub steps_to_threshold: Option<usize>,
    pub final_token_acc: f64,
    pub final_seq_acc: f64,
    pub param_count: usize,
}

impl ComparisonRow {
    pub fn from_record(r: &RunRecord) -> Self {
        Self {
            arch: r.arch,
            task: r.task,
            seed: r.seed,
            steps_to_threshold: r.steps_to_threshold,
            final_token_acc: r.final_eval.token_acc,
            final_seq_acc: r.final_eval.seq_acc,
            param_count: r.param_count.total,
        }
    }
}

/// Runs every `(arch, task, seed)` in that nesting order. `model` supplies the
/// shared shape; its architecture and decoder flag are set per run.
pub fn compare(
    archs: &[Arch],
    tasks: &[TaskSpec],
    seeds: &[u64],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Vec<ComparisonRow>> {
    if seeds.len() < MIN_SEEDS {
        return Err(Error::config(format!(
            "a comparison needs at least {MIN_SEEDS} seeds, got {}",
            seeds.len()
        )));
    }
    if archs.is_empty() || tasks.is_empty() {
        return Err(Error::config(
            "a comparison needs at least one architecture and task",
        ));
    }
    let mut rows = Vec::with_capacity(archs.len() * tasks.len() * seeds.len());
    for &arch in archs {
        for task in tasks {
            let mc = ModelConfig {
                arch,
                decoder: task.kind == TaskKind::Reverse,
                ..model.clone()
            };
            for &seed in seeds {
                let record = train(
                    &mc,
                    task,
                    &TrainConfig {
                        seed,
                        ..cfg.clone()
                    },
                )?;
                rows.push(ComparisonRow::from_record(&record));
            }
        }
    }
    Ok(rows)
}

pub fn write_comparison_csv(mut out: impl Write, rows: &[ComparisonRow]) -> Result<()> {
    writeln!(out, "{COMPARISON_HEADER}")?;
    for r in rows {
        let steps = r
            .steps_to_threshold
            .map_or_else(|| "NA".to_string(), |s| s.to_string());
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.arch, r.task, r.seed, steps, r.final_token_acc, r.param_count
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Mean and sample standard deviation; `None` when `values` is empty.
fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

/// Per `(arch, task)` aggregate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub arch: Arch,
    pub task: TaskKind,
    pub runs: usize,
    pub reached_threshold: usize,
    /// Over runs that reached the threshold.
    pub steps_mean: Option<f64>,
    pub steps_std: Option<f64>,
    pub final_token_acc_mean: f64,
    pub final_token_acc_std: f64,
}

/// One summary per distinct `(arch, task)` slot, in first-seen order.
/// Repeated architectures in `archs` are kept apart by position.
pub fn summarize(rows: &[ComparisonRow], seeds_per_slot: usize) -> Vec<Summary> {
    rows.chunks(seeds_per_slot.max(1))
        .map(|chunk| {
            let steps: Vec<f64> = chunk
                .iter()
                .filter_map(|r| r.steps_to_threshold.map(|s| s as f64))
                .collect();
            let accs: Vec<f64> = chunk.iter().map(|r| r.final_token_acc).collect();
            let (acc_mean, acc_std) = mean_std(&accs).expect("non-empty chunk");
            let st = mean_std(&steps);
            Summary {
                arch: chunk[0].arch,
                task: chunk[0].task,
                runs: chunk.len(),
                reached_threshold: steps.len(),
                steps_mean: st.map(|s| s.0),
                steps_std: st.map(|s| s.1),
                final_token_acc_mean: acc_mean,
                final_token_acc_std: acc_std,
            }
        })
        .collect()
}

/// Human-readable table of summaries followed by [`REFERENCE_FOOTER`].
pub fn report(summaries: &[Summary]) -> String {
    let mut s = String::new();
    for m in summaries {
        let steps = match (m.steps_mean, m.steps_std) {
            (Some(mu), Some(sd)) => format!("{mu:.1} ± {sd:.1}"),
            _ => "n/a".to_string(),
        };
        s.push_str(&format!(
            "{} {}: {}/{} reached threshold, steps {}, final token acc {:.4} ± {:.4}\n",
            m.arch,
            m.task,
            m.reached_threshold,
            m.runs,
            steps,
            m.final_token_acc_mean,
            m.final_token_acc_std
        ));
    }
    s.push_str(REFERENCE_FOOTER);
    s.push('\n');
    s
}
