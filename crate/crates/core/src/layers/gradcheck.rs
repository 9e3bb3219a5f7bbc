//! Finite-difference verification of layer gradients.
//!
//! The loss is `Σ layer(x) ⊙ W` for a fixed random `W`. Entries where the
//! forward and backward one-sided differences disagree straddle a ReLU kink and
//! are left out of the comparison.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::forward::{layer_on_graph, LayerContext, Memory};
use crate::layers::params::{LayerConfig, LayerKind, LayerParams};
use crate::tensor::{uniform, GradFault, Graph, Matrix, RngState};

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-6;
/// One-sided differences further apart than this (relative to `max(1, |D₀|)`) mark a kink.
pub const KINK_TOLERANCE: f64 = 1e-4;
/// Largest share of entries that may be skipped as kinks.
pub const MAX_SKIPPED_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub skipped: usize,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub kind: LayerKind,
    pub d_model: usize,
    pub n: usize,
    pub heads: usize,
    pub seed: u64,
    pub tensors: Vec<TensorCheck>,
    pub worst_tensor: String,
    pub worst_rel_error: f64,
    pub skipped_fraction: f64,
    pub passed: bool,
}

struct Problem {
    params: LayerParams,
    x: Matrix,
    memory: Option<Matrix>,
    weights: Matrix,
}

impl Problem {
    fn random(kind: LayerKind, cfg: &LayerConfig, n: usize, seed: u64) -> Result<Self> {
        let mut rng = RngState::new(seed);
        let mut params = LayerParams::init(kind, cfg, &mut rng)?;
        for (name, m) in params.tensors_mut() {
            if name.ends_with(".b1") || name.ends_with(".b2") || name.ends_with(".bias") {
                *m = uniform(m.rows(), m.cols(), -0.1, 0.1, &mut rng);
            } else if name.ends_with(".gain") {
                *m = uniform(m.rows(), m.cols(), 0.8, 1.2, &mut rng);
            }
        }
        let d = cfg.d_model;
        let x = uniform(n, d, -1.0, 1.0, &mut rng);
        let memory = kind
            .is_decoder()
            .then(|| uniform(n + 1, d, -1.0, 1.0, &mut rng));
        let weights = uniform(n, d, -1.0, 1.0, &mut rng);
        Ok(Self {
            params,
            x,
            memory,
            weights,
        })
    }

    /// Named inputs in a fixed order: layer tensors, then `input`, then `memory`.
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.params.tensors();
        out.push(("input".to_string(), &self.x));
        if let Some(m) = &self.memory {
            out.push(("memory".to_string(), m));
        }
        out
    }

    fn tensor_mut(&mut self, index: usize) -> &mut Matrix {
        let count = self.params.tensors().len();
        if index < count {
            self.params.tensors_mut().swap_remove(index).1
        } else if index == count {
            &mut self.x
        } else {
            self.memory.as_mut().expect("memory tensor index")
        }
    }

    /// Loss value, plus gradients of every tensor when `grads` is set.
    fn evaluate(&self, grads: bool, fault: Option<GradFault>) -> Result<(f64, Vec<Matrix>)> {
        let mut g = match fault {
            Some(f) => Graph::with_fault(f),
            None => Graph::new(),
        };
        let p = self.params.map(|m| g.param(m.clone()));
        let x = g.param(self.x.clone());
        let memory = self.memory.as_ref().map(|m| Memory {
            value: g.param(m.clone()),
            seq_len: m.rows(),
        });
        let ctx = LayerContext::for_kind(self.params.kind, self.x.rows(), memory);
        let out = layer_on_graph(&mut g, &p, x, &ctx)?;
        let w = g.constant(self.weights.clone());
        let prod = g.mul(out, w)?;
        let loss = g.sum(prod);
        let value = g.value(loss).get(0, 0);
        if !grads {
            return Ok((value, Vec::new()));
        }
        let gr = g.backward(loss)?;
        let mut all: Vec<Matrix> = p.tensors().into_iter().map(|(_, v)| gr.wrt(*v)).collect();
        all.push(gr.wrt(x));
        if let Some(m) = memory {
            all.push(gr.wrt(m.value));
        }
        Ok((value, all))
    }
}

/// Compares analytic and finite-difference gradients of one random layer.
pub fn layer_gradcheck(
    kind: LayerKind,
    cfg: &LayerConfig,
    n: usize,
    seed: u64,
    fault: Option<GradFault>,
) -> Result<GradcheckReport> {
    if n == 0 {
        return Err(Error::config("gradcheck needs n ≥ 1"));
    }
    let mut problem = Problem::random(kind, cfg, n, seed)?;
    let (f0, analytic) = problem.evaluate(true, fault)?;
    let names: Vec<String> = problem.tensors().into_iter().map(|(n, _)| n).collect();

    let mut tensors = Vec::with_capacity(names.len());
    let (mut total, mut total_skipped) = (0usize, 0usize);
    for (ti, name) in names.into_iter().enumerate() {
        let len = analytic[ti].data().len();
        let (mut num, mut ana) = (Vec::with_capacity(len), Vec::with_capacity(len));
        let mut skipped = 0;
        for e in 0..len {
            let orig = problem.tensor_mut(ti).data()[e];
            problem.tensor_mut(ti).data_mut()[e] = orig + FD_STEP;
            let fp = problem.evaluate(false, None)?.0;
            problem.tensor_mut(ti).data_mut()[e] = orig - FD_STEP;
            let fm = problem.evaluate(false, None)?.0;
            problem.tensor_mut(ti).data_mut()[e] = orig;

            let central = (fp - fm) / (2.0 * FD_STEP);
            let forward = (fp - f0) / FD_STEP;
            let backward = (f0 - fm) / FD_STEP;
            if (forward - backward).abs() > KINK_TOLERANCE * central.abs().max(1.0) {
                skipped += 1;
                continue;
            }
            num.push(central);
            ana.push(analytic[ti].data()[e]);
        }
        let rel_error = vec_relative_error(&ana, &num);
        total += len;
        total_skipped += skipped;
        tensors.push(TensorCheck {
            name,
            entries: len,
            skipped,
            rel_error,
        });
    }
    let worst = tensors
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .expect("at least one tensor");
    let skipped_fraction = total_skipped as f64 / total as f64;
    let worst_rel_error = worst.rel_error;
    Ok(GradcheckReport {
        kind,
        d_model: cfg.d_model,
        n,
        heads: cfg.heads,
        seed,
        worst_tensor: worst.name.clone(),
        worst_rel_error,
        skipped_fraction,
        passed: worst_rel_error < GRADCHECK_TOLERANCE && skipped_fraction <= MAX_SKIPPED_FRACTION,
        tensors,
    })
}

fn vec_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_kind_passes_small_instance() {
        for kind in [
            LayerKind::Transformer,
            LayerKind::Macaron,
            LayerKind::MacaronDecoder,
            LayerKind::TransformerDecoder,
        ] {
            let r = layer_gradcheck(kind, &LayerConfig::new(4, 2), 3, 5, None).unwrap();
            assert!(r.passed, "{kind}: {} {}", r.worst_tensor, r.worst_rel_error);
            assert!(r.tensors.iter().all(|t| t.entries > 0));
        }
    }

    #[test]
    fn layer_norm_variant_passes() {
        let mut cfg = LayerConfig::new(4, 1);
        cfg.layer_norm = true;
        let r = layer_gradcheck(LayerKind::Macaron, &cfg, 3, 9, None).unwrap();
        assert!(r.passed, "{} {}", r.worst_tensor, r.worst_rel_error);
    }

    #[test]
    fn flipped_adjoint_fails() {
        let r = layer_gradcheck(
            LayerKind::Transformer,
            &LayerConfig::new(4, 1),
            3,
            5,
            Some(GradFault::FlipFirstMatMulRhs),
        )
        .unwrap();
        assert!(!r.passed);
        assert!(r.worst_rel_error > 1.0);
        assert_eq!(r.worst_tensor, "self_attn.q.0");
    }
}
