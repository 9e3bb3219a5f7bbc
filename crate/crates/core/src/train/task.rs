//! Synthetic copy and reverse tasks.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::RngState;

pub const PAD: usize = 0;
/// First decoder input token.
pub const BOS: usize = 1;
/// Smallest data token; data tokens are `FIRST_DATA_TOKEN..vocab`.
pub const FIRST_DATA_TOKEN: usize = 2;

/// Collision checking between train and validation sets applies up to this
/// many bits of sequence entropy (`n · log₂V`).
pub const COLLISION_CHECK_BITS: f64 = 40.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Copy,
    Reverse,
}

impl TaskKind {
    pub fn label(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
        }
    }

    pub fn target_for(self, input: &[usize]) -> Vec<usize> {
        match self {
            TaskKind::Copy => input.to_vec(),
            TaskKind::Reverse => input.iter().rev().copied().collect(),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            _ => Err(Error::config(format!(
                "unknown task '{s}' (expected copy or reverse)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Total vocabulary including `PAD` and `BOS`.
    pub vocab: usize,
    pub seq_len: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub seed: u64,
}

impl TaskSpec {
    /// `V = 16`, `n = 12`, 20000 training and 512 validation sequences.
    pub fn copy_default() -> Self {
        Self {
            kind: TaskKind::Copy,
            vocab: 16,
            seq_len: 12,
            train_size: 20_000,
            valid_size: 512,
            seed: 0,
        }
    }

    /// Same sizes as [`TaskSpec::copy_default`].
    pub fn reverse_default() -> Self {
        Self {
            kind: TaskKind::Reverse,
            ..Self::copy_default()
        }
    }

    pub fn default_for(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Copy => Self::copy_default(),
            TaskKind::Reverse => Self::reverse_default(),
        }
    }

    pub fn data_tokens(&self) -> usize {
        self.vocab - FIRST_DATA_TOKEN
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 3 {
            return Err(Error::config(format!(
                "vocabulary must hold PAD, BOS and at least one data token, got {}",
                self.vocab
            )));
        }
        if self.seq_len == 0 || self.train_size == 0 || self.valid_size == 0 {
            return Err(Error::config(
                "sequence length and dataset sizes must be positive",
            ));
        }
        Ok(())
    }

    fn needs_collision_check(&self) -> bool {
        self.seq_len as f64 * (self.vocab as f64).log2() <= COLLISION_CHECK_BITS
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Example {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
}

fn sample_sequence(spec: &TaskSpec, rng: &mut RngState) -> Vec<usize> {
    (0..spec.seq_len)
        .map(|_| FIRST_DATA_TOKEN + rng.below(spec.data_tokens() as u64) as usize)
        .collect()
}

/// Train and validation sets from independent streams of the task seed.
/// Small sequence spaces are checked so no validation input occurs in training.
pub fn generate_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = RngState::new(spec.seed);
    let mut train_rng = root.split(0);
    let mut valid_rng = root.split(1);
    let example = |input: Vec<usize>| Example {
        target: spec.kind.target_for(&input),
        input,
    };
    let train: Vec<Example> = (0..spec.train_size)
        .map(|_| example(sample_sequence(spec, &mut train_rng)))
        .collect();

    let mut valid = Vec::with_capacity(spec.valid_size);
    if spec.needs_collision_check() {
        let seen: HashSet<&[usize]> = train.iter().map(|e| e.input.as_slice()).collect();
        let max_draws = 100 * spec.valid_size + 10_000;
        let mut draws = 0;
        while valid.len() < spec.valid_size {
            if draws == max_draws {
                return Err(Error::config(format!(
                    "could not draw {} validation sequences outside the training set",
                    spec.valid_size
                )));
            }
            draws += 1;
            let s = sample_sequence(spec, &mut valid_rng);
            if !seen.contains(s.as_slice()) {
                valid.push(example(s));
            }
        }
    } else {
        valid.extend((0..spec.valid_size).map(|_| example(sample_sequence(spec, &mut valid_rng))));
    }
    Ok(Dataset {
        spec: spec.clone(),
        train,
        valid,
    })
}
