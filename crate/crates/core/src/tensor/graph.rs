//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as a node holding its value. Nodes are
//! appended in evaluation order, so walking the tape backwards from the output
//! visits each node once in reverse topological order.

use crate::error::{Error, Result};
use crate::tensor::attention::{attention_backward, attention_forward, Blocks, Mask};
use crate::tensor::matrix::{softmax_in_place, Matrix};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Deliberate backward-pass corruption, used as a control for gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradFault {
    /// Negate the adjoint sent to the right operand of the first matmul on the tape.
    FlipFirstMatMulRhs,
}

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sum(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        blocks: Blocks,
        scale: f64,
        probs: Vec<Matrix>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    SmoothedCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: f64,
        probs: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<GradFault>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: GradFault) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf: gradients flow into it.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_bt(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMulBt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    /// Adds the `1 x cols` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = self.value(a).add_row(self.value(bias))?;
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(value, Op::AddRow(a, bias), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    /// Sum of all entries as a `1 x 1` value.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = crate::tensor::matrix::softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_cols(&mats)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Row lookup: row `r` of the result is row `indices[r]` of `table`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::contract(format!(
                "gather index {bad} out of range for {} rows",
                t.rows()
            )));
        }
        let mut value = Matrix::zeros(indices.len(), t.cols());
        for (r, &i) in indices.iter().enumerate() {
            value.row_mut(r).copy_from_slice(t.row(i));
        }
        let ng = self.ng(table);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    /// Blocked `softmax(scale · Q Kᵀ + mask) · V`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        blocks: Blocks,
        mask: &Mask,
        scale: f64,
    ) -> Result<Var> {
        let fwd = attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            blocks,
            mask,
            scale,
        )?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            fwd.output,
            Op::Attention {
                q,
                k,
                v,
                blocks,
                scale,
                probs: fwd.probs,
            },
            ng,
        ))
    }

    /// Per-row normalization to zero mean and unit variance, then `· gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        for p in [gain, bias] {
            if self.value(p).shape() != (1, cols) {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: xv.shape(),
                    rhs: self.value(p).shape(),
                });
            }
        }
        let mut normalized = Matrix::zeros(xv.rows(), cols);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, &v) in normalized.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut value = normalized.clone();
        for r in 0..value.rows() {
            for ((o, &gj), &bj) in value.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gj + bj;
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            ng,
        ))
    }

    /// Mean over rows of the cross-entropy between `softmax(logits)` and the
    /// label-smoothed target distribution (`1 - smoothing` on the gold token,
    /// `smoothing / (V - 1)` on every other token).
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
    ) -> Result<Var> {
        let l = self.value(logits);
        let (loss, probs) = smoothed_cross_entropy_value(l, targets, smoothing)?;
        let ng = self.ng(logits);
        Ok(self.push(
            Matrix::scalar(loss),
            Op::SmoothedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
            },
            ng,
        ))
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let shape = self.value(output).shape();
        if shape != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::scalar(1.0));
        let first_matmul = match self.fault {
            Some(GradFault::FlipFirstMatMulRhs) => self
                .nodes
                .iter()
                .position(|n| matches!(n.op, Op::MatMul(..))),
            None => None,
        };

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                self.propagate(id, node, &g, first_matmul == Some(id), &mut grads)?;
            }
            grads[id] = Some(g);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.needs_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(
        &self,
        id: usize,
        node: &Node,
        g: &Matrix,
        flip: bool,
        grads: &mut [Option<Matrix>],
    ) -> Result<()> {
        let mut acc = |v: Var, delta: Matrix| -> Result<()> {
            if !self.nodes[v.0].needs_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.matmul_bt(self.value(*b))?)?;
                }
                if self.ng(*b) {
                    let db = self.value(*a).matmul_at(g)?;
                    acc(*b, if flip { db.scale(-1.0) } else { db })?;
                }
            }
            Op::MatMulBt(a, b) => {
                // c = a bᵀ: da = g b, db = gᵀ a
                if self.ng(*a) {
                    acc(*a, g.matmul(self.value(*b))?)?;
                }
                if self.ng(*b) {
                    acc(*b, g.matmul_at(self.value(*a))?)?;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone())?;
                if self.ng(*bias) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, &x) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    acc(*bias, db)?;
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.hadamard(self.value(*b))?)?;
                }
                if self.ng(*b) {
                    acc(*b, g.hadamard(self.value(*a))?)?;
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s))?,
            Op::Relu(a) => {
                let d = g.zip_with(
                    self.value(*a),
                    "relu'",
                    |gv, x| if x > 0.0 { gv } else { 0.0 },
                )?;
                acc(*a, d)?;
            }
            Op::Tanh(a) => {
                let d = g.zip_with(&self.nodes[id].value, "tanh'", |gv, y| gv * (1.0 - y * y))?;
                acc(*a, d)?;
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Matrix::filled(r, c, g.get(0, 0)))?;
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let inner: f64 = y.row(r).iter().zip(g.row(r)).map(|(p, gv)| p * gv).sum();
                    for ((o, &p), &gv) in d.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *o = p * (gv - inner);
                    }
                }
                acc(*a, d)?;
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        acc(p, g.slice_cols(start, w))?;
                    }
                    start += w;
                }
            }
            Op::Gather { table, indices } => {
                let t = self.value(*table);
                let mut d = Matrix::zeros(t.rows(), t.cols());
                for (r, &i) in indices.iter().enumerate() {
                    for (o, &x) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(*table, d)?;
            }
            Op::Attention {
                q,
                k,
                v,
                blocks,
                scale,
                probs,
            } => {
                let (dq, dk, dv) = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    probs,
                    *blocks,
                    *scale,
                    g,
                );
                acc(*q, dq)?;
                acc(*k, dk)?;
                acc(*v, dv)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let cols = normalized.cols() as f64;
                let gv = self.value(*gain).data();
                let mut dx = Matrix::zeros(normalized.rows(), normalized.cols());
                let mut dgain = Matrix::zeros(1, normalized.cols());
                let mut dbias = Matrix::zeros(1, normalized.cols());
                for r in 0..normalized.rows() {
                    let xh = normalized.row(r);
                    let gr = g.row(r);
                    let dxh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let mean_dxh = dxh.iter().sum::<f64>() / cols;
                    let mean_dxh_xh = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols;
                    for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = inv_std[r] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                    for j in 0..xh.len() {
                        dgain.data_mut()[j] += gr[j] * xh[j];
                        dbias.data_mut()[j] += gr[j];
                    }
                }
                acc(*x, dx)?;
                acc(*gain, dgain)?;
                acc(*bias, dbias)?;
            }
            Op::SmoothedCrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                let n = probs.rows() as f64;
                let vocab = probs.cols();
                let off = smoothing / (vocab - 1) as f64;
                let on = 1.0 - smoothing;
                let scale = g.get(0, 0) / n;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    for (j, o) in d.row_mut(r).iter_mut().enumerate() {
                        let q = if j == t { on } else { off };
                        *o = (*o - q) * scale;
                    }
                }
                acc(*logits, d)?;
            }
        }
        Ok(())
    }
}

/// Loss value and the softmax probabilities it was computed from.
pub(crate) fn smoothed_cross_entropy_value(
    logits: &Matrix,
    targets: &[usize],
    smoothing: f64,
) -> Result<(f64, Matrix)> {
    let vocab = logits.cols();
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::contract(format!(
            "label smoothing must lie in [0, 1), got {smoothing}"
        )));
    }
    if vocab < 2 {
        return Err(Error::contract("cross-entropy needs at least two classes"));
    }
    if targets.len() != logits.rows() {
        return Err(Error::Dimension {
            op: "cross_entropy targets",
            lhs: logits.shape(),
            rhs: (targets.len(), 1),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::contract(format!(
            "target {bad} outside vocabulary of size {vocab}"
        )));
    }
    let off = smoothing / (vocab - 1) as f64;
    let on = 1.0 - smoothing;
    let mut probs = logits.clone();
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let mut loss = 0.0;
        for (j, &z) in row.iter().enumerate() {
            let q = if j == t { on } else { off };
            if q != 0.0 {
                loss -= q * (z - lse);
            }
        }
        total += loss;
        softmax_in_place(probs.row_mut(r));
    }
    Ok((total / logits.rows() as f64, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{finite_diff_grad, relative_error};
    use crate::tensor::init::uniform;
    use crate::tensor::rng::RngState;

    #[test]
    fn square_at_three() {
        let mut g = Graph::new();
        let x = g.param(Matrix::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).get(0, 0), 6.0);
    }

    #[test]
    fn sum_of_linear_map() {
        // d/dW sum(x W) = xᵀ 1
        let xv = Matrix::from_rows(&[[1.0, 2.0], [3.0, -1.0]]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(xv.clone());
        let w = g.param(Matrix::from_fn(2, 3, |i, j| (i + j) as f64));
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        let expected = Matrix::from_fn(2, 3, |i, _| xv.get(0, i) + xv.get(1, i));
        assert_eq!(grads.wrt(w), expected);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Matrix::zeros(2, 2));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Matrix::scalar(2.0));
        let a = g.scale(x, 3.0);
        let b = g.add(a, x).unwrap();
        let grads = g.backward(b).unwrap();
        assert_eq!(grads.wrt(x).get(0, 0), 4.0);
    }

    fn check_unary(build: impl Fn(&mut Graph, Var) -> Var, rows: usize, cols: usize, seed: u64) {
        let mut rng = RngState::new(seed);
        let x0 = uniform(rows, cols, -1.0, 1.0, &mut rng);
        let out_shape = {
            let mut g = Graph::new();
            let xv = g.param(x0.clone());
            let y = build(&mut g, xv);
            g.value(y).shape()
        };
        let weights = uniform(out_shape.0, out_shape.1, -1.0, 1.0, &mut rng);
        let f = |x: &Matrix| {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let y = build(&mut g, xv);
            let w = g.constant(weights.clone());
            let p = g.mul(y, w).unwrap();
            let s = g.sum(p);
            (g, xv, s)
        };
        let (g, xv, s) = f(&x0);
        let ad = g.backward(s).unwrap().wrt(xv);
        let fd = finite_diff_grad(
            |x| {
                let (g, _, s) = f(x);
                g.value(s).get(0, 0)
            },
            &x0,
            1e-5,
        );
        let err = relative_error(&ad, &fd);
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        check_unary(|g, x| g.tanh(x), 3, 4, 1);
        check_unary(|g, x| g.softmax_rows(x), 3, 4, 2);
        check_unary(|g, x| g.scale(x, -2.5), 3, 4, 3);
        check_unary(
            |g, x| {
                let gain = g.constant(Matrix::from_fn(1, 4, |_, j| 0.5 + j as f64));
                let bias = g.constant(Matrix::filled(1, 4, 0.1));
                g.layer_norm(x, gain, bias).unwrap()
            },
            3,
            4,
            4,
        );
        check_unary(
            |g, x| {
                let t = g.tanh(x);
                g.matmul_bt(t, x).unwrap()
            },
            3,
            3,
            5,
        );
        check_unary(
            |g, x| {
                let y = g.concat_cols(&[x, x]).unwrap();
                let h = g.tanh(y);
                g.gather(h, &[2, 0, 0]).unwrap()
            },
            3,
            4,
            6,
        );
    }

    #[test]
    fn attention_matches_finite_differences() {
        let mut rng = RngState::new(9);
        let q0 = uniform(6, 3, -1.0, 1.0, &mut rng);
        let k0 = uniform(4, 3, -1.0, 1.0, &mut rng);
        let v0 = uniform(4, 2, -1.0, 1.0, &mut rng);
        let r = uniform(6, 2, -1.0, 1.0, &mut rng);
        let blocks = Blocks {
            q_len: 3,
            kv_len: 2,
        };
        let run = |q: &Matrix, k: &Matrix, v: &Matrix| {
            let mut g = Graph::new();
            let (qv, kv, vv) = (g.param(q.clone()), g.param(k.clone()), g.param(v.clone()));
            let a = g.attention(qv, kv, vv, blocks, &Mask::None, 0.7).unwrap();
            let w = g.constant(r.clone());
            let p = g.mul(a, w).unwrap();
            let s = g.sum(p);
            (g, [qv, kv, vv], s)
        };
        let (g, vars, s) = run(&q0, &k0, &v0);
        let grads = g.backward(s).unwrap();
        let fq = finite_diff_grad(
            |q| {
                let (g, _, s) = run(q, &k0, &v0);
                g.value(s).get(0, 0)
            },
            &q0,
            1e-5,
        );
        let fk = finite_diff_grad(
            |k| {
                let (g, _, s) = run(&q0, k, &v0);
                g.value(s).get(0, 0)
            },
            &k0,
            1e-5,
        );
        let fv = finite_diff_grad(
            |v| {
                let (g, _, s) = run(&q0, &k0, v);
                g.value(s).get(0, 0)
            },
            &v0,
            1e-5,
        );
        assert!(relative_error(&grads.wrt(vars[0]), &fq) < 1e-5);
        assert!(relative_error(&grads.wrt(vars[1]), &fk) < 1e-5);
        assert!(relative_error(&grads.wrt(vars[2]), &fv) < 1e-5);
    }

    #[test]
    fn causal_attention_gradient() {
        let mut rng = RngState::new(10);
        let x0 = uniform(4, 3, -1.0, 1.0, &mut rng);
        let run = |x: &Matrix| {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let a = g
                .attention(
                    xv,
                    xv,
                    xv,
                    Blocks {
                        q_len: 4,
                        kv_len: 4,
                    },
                    &Mask::Causal,
                    0.5,
                )
                .unwrap();
            let t = g.tanh(a);
            let s = g.sum(t);
            (g, xv, s)
        };
        let (g, xv, s) = run(&x0);
        let ad = g.backward(s).unwrap().wrt(xv);
        let fd = finite_diff_grad(
            |x| {
                let (g, _, s) = run(x);
                g.value(s).get(0, 0)
            },
            &x0,
            1e-5,
        );
        assert!(relative_error(&ad, &fd) < 1e-5);
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = RngState::new(12);
        let l0 = uniform(5, 4, -2.0, 2.0, &mut rng);
        let targets = [0, 3, 1, 1, 2];
        let run = |l: &Matrix| {
            let mut g = Graph::new();
            let lv = g.param(l.clone());
            let s = g.smoothed_cross_entropy(lv, &targets, 0.1).unwrap();
            (g, lv, s)
        };
        let (g, lv, s) = run(&l0);
        let ad = g.backward(s).unwrap().wrt(lv);
        let fd = finite_diff_grad(
            |l| {
                let (g, _, s) = run(l);
                g.value(s).get(0, 0)
            },
            &l0,
            1e-5,
        );
        assert!(relative_error(&ad, &fd) < 1e-5);
    }

    #[test]
    fn fault_flips_first_matmul_rhs() {
        let build = |g: &mut Graph| {
            let x = g.constant(Matrix::from_rows(&[[1.0, 2.0]]).unwrap());
            let w = g.param(Matrix::from_rows(&[[1.0], [1.0]]).unwrap());
            let y = g.matmul(x, w).unwrap();
            (w, g.sum(y))
        };
        let mut clean = Graph::new();
        let (w, s) = build(&mut clean);
        let mut faulty = Graph::with_fault(GradFault::FlipFirstMatMulRhs);
        let (wf, sf) = build(&mut faulty);
        let a = clean.backward(s).unwrap().wrt(w);
        let b = faulty.backward(sf).unwrap().wrt(wf);
        assert_eq!(a.scale(-1.0), b);
    }
}
