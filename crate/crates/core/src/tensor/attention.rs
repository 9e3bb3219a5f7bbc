//! Blocked scaled dot-product attention kernel shared by the plain and taped paths.

use crate::error::{Error, Result};
use crate::tensor::matrix::{dot, Matrix};

/// Which key positions each query position may attend to.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum Mask {
    #[default]
    None,
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// Row-major `q_len x kv_len` table of allowed pairs.
    Explicit {
        rows: usize,
        cols: usize,
        allowed: Vec<bool>,
    },
}

impl Mask {
    pub fn explicit(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::Dimension {
                op: "Mask::explicit",
                lhs: (rows, cols),
                rhs: (allowed.len(), 1),
            });
        }
        Ok(Mask::Explicit {
            rows,
            cols,
            allowed,
        })
    }

    fn check(&self, q_len: usize, kv_len: usize) -> Result<()> {
        match self {
            Mask::None => Ok(()),
            Mask::Causal if q_len == kv_len => Ok(()),
            Mask::Causal => Err(Error::Dimension {
                op: "causal mask",
                lhs: (q_len, kv_len),
                rhs: (q_len, q_len),
            }),
            Mask::Explicit { rows, cols, .. } => {
                if (*rows, *cols) == (q_len, kv_len) {
                    Ok(())
                } else {
                    Err(Error::Dimension {
                        op: "attention mask",
                        lhs: (*rows, *cols),
                        rhs: (q_len, kv_len),
                    })
                }
            }
        }
    }

    #[inline]
    fn allows(&self, i: usize, j: usize) -> bool {
        match self {
            Mask::None => true,
            Mask::Causal => j <= i,
            Mask::Explicit { cols, allowed, .. } => allowed[i * cols + j],
        }
    }
}

/// Shapes of a blocked attention call: `q` holds `batch` blocks of `q_len`
/// rows, `k` and `v` hold `batch` blocks of `kv_len` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Blocks {
    pub q_len: usize,
    pub kv_len: usize,
}

impl Blocks {
    pub fn single(q: &Matrix, kv: &Matrix) -> Self {
        Self {
            q_len: q.rows(),
            kv_len: kv.rows(),
        }
    }
}

pub(crate) struct AttentionForward {
    pub output: Matrix,
    /// Pre-softmax scores per block; masked entries are `-inf`.
    pub scores: Vec<Matrix>,
    pub probs: Vec<Matrix>,
}

pub(crate) fn attention_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    blocks: Blocks,
    mask: &Mask,
    scale: f64,
) -> Result<AttentionForward> {
    let Blocks { q_len, kv_len } = blocks;
    if q_len == 0 || kv_len == 0 || !q.rows().is_multiple_of(q_len) {
        return Err(Error::Dimension {
            op: "attention blocks",
            lhs: q.shape(),
            rhs: (q_len, kv_len),
        });
    }
    let batch = q.rows() / q_len;
    if k.rows() != batch * kv_len || q.cols() != k.cols() {
        return Err(Error::Dimension {
            op: "attention q/k",
            lhs: q.shape(),
            rhs: k.shape(),
        });
    }
    if v.rows() != k.rows() {
        return Err(Error::Dimension {
            op: "attention k/v",
            lhs: k.shape(),
            rhs: v.shape(),
        });
    }
    mask.check(q_len, kv_len)?;

    let dv = v.cols();
    let mut output = Matrix::zeros(q.rows(), dv);
    let mut scores = Vec::with_capacity(batch);
    let mut probs = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut s = Matrix::zeros(q_len, kv_len);
        for i in 0..q_len {
            let qi = q.row(b * q_len + i);
            for j in 0..kv_len {
                let e = if mask.allows(i, j) {
                    scale * dot(qi, k.row(b * kv_len + j))
                } else {
                    f64::NEG_INFINITY
                };
                s.set(i, j, e);
            }
        }
        let mut p = Matrix::zeros(q_len, kv_len);
        let mut order = Vec::with_capacity(kv_len);
        for i in 0..q_len {
            key_order(&s, i, k, v, b * kv_len, &mut order);
            if order.is_empty() {
                return Err(Error::contract(format!(
                    "attention mask hides every key from query {i}"
                )));
            }
            let max = s.get(i, order[order.len() - 1]);
            let mut total = 0.0;
            for &j in &order {
                let e = (s.get(i, j) - max).exp();
                p.set(i, j, e);
                total += e;
            }
            let out_row = output.row_mut(b * q_len + i);
            for &j in &order {
                let w = p.get(i, j) / total;
                p.set(i, j, w);
                for (o, &x) in out_row.iter_mut().zip(v.row(b * kv_len + j)) {
                    *o += w * x;
                }
            }
        }
        scores.push(s);
        probs.push(p);
    }
    Ok(AttentionForward {
        output,
        scores,
        probs,
    })
}

/// Visible keys of query `i` sorted by score, then by the key and value rows.
/// Sums over keys run in this order, so permuting the sequence permutes the
/// output bit for bit.
fn key_order(s: &Matrix, i: usize, k: &Matrix, v: &Matrix, base: usize, order: &mut Vec<usize>) {
    order.clear();
    order.extend((0..s.cols()).filter(|&j| s.get(i, j) != f64::NEG_INFINITY));
    let bits = |m: &Matrix, j: usize| {
        m.row(base + j)
            .iter()
            .map(|x| x.to_bits())
            .collect::<Vec<_>>()
    };
    order.sort_by(|&a, &b| {
        s.get(i, a)
            .total_cmp(&s.get(i, b))
            .then_with(|| bits(k, a).cmp(&bits(k, b)))
            .then_with(|| bits(v, a).cmp(&bits(v, b)))
    });
}

/// Gradients of the blocked attention with respect to `q`, `k`, `v`.
pub(crate) fn attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    probs: &[Matrix],
    blocks: Blocks,
    scale: f64,
    grad_out: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let Blocks { q_len, kv_len } = blocks;
    let mut dq = Matrix::zeros(q.rows(), q.cols());
    let mut dk = Matrix::zeros(k.rows(), k.cols());
    let mut dv = Matrix::zeros(v.rows(), v.cols());
    let mut dp = vec![0.0; kv_len];
    for (b, p) in probs.iter().enumerate() {
        for i in 0..q_len {
            let go = grad_out.row(b * q_len + i);
            // dV += Pᵀ dO, dP = dO Vᵀ
            for j in 0..kv_len {
                let w = p.get(i, j);
                let vrow = b * kv_len + j;
                if w != 0.0 {
                    for (d, &g) in dv.row_mut(vrow).iter_mut().zip(go) {
                        *d += w * g;
                    }
                }
                dp[j] = dot(go, v.row(vrow));
            }
            let inner: f64 = (0..kv_len).map(|j| dp[j] * p.get(i, j)).sum();
            for j in 0..kv_len {
                let w = p.get(i, j);
                if w == 0.0 {
                    continue;
                }
                let ds = scale * w * (dp[j] - inner);
                let krow = b * kv_len + j;
                let qrow = b * q_len + i;
                for (d, &x) in dq.row_mut(qrow).iter_mut().zip(k.row(krow)) {
                    *d += ds * x;
                }
                for (d, &x) in dk.row_mut(krow).iter_mut().zip(q.row(qrow)) {
                    *d += ds * x;
                }
            }
        }
    }
    (dq, dk, dv)
}
