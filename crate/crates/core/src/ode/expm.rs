//! Matrix exponential by scaling and squaring with a degree-13 Padé approximant.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const THETA_13: f64 = 5.371_920_351_148_152;

const PADE_13: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];

fn one_norm(a: &Matrix) -> f64 {
    (0..a.cols())
        .map(|j| (0..a.rows()).map(|i| a.get(i, j).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn lin(terms: &[(f64, &Matrix)]) -> Matrix {
    let (r, c) = terms[0].1.shape();
    let mut out = Matrix::zeros(r, c);
    for (w, m) in terms {
        out.axpy(*w, m).expect("same shape");
    }
    out
}

/// `exp(a)` for a square matrix.
pub fn expm(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::Dimension {
            op: "expm",
            lhs: a.shape(),
            rhs: (a.cols(), a.rows()),
        });
    }
    if n == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let norm = one_norm(a);
    let squarings = if norm > THETA_13 {
        (norm / THETA_13).log2().ceil() as i32
    } else {
        0
    };
    let a = a.scale(0.5f64.powi(squarings));
    let b = &PADE_13;
    let id = Matrix::identity(n);
    let a2 = a.matmul(&a)?;
    let a4 = a2.matmul(&a2)?;
    let a6 = a4.matmul(&a2)?;

    let inner_u = a6.matmul(&lin(&[(b[13], &a6), (b[11], &a4), (b[9], &a2)]))?;
    let u = a.matmul(&lin(&[
        (1.0, &inner_u),
        (b[7], &a6),
        (b[5], &a4),
        (b[3], &a2),
        (b[1], &id),
    ]))?;
    let inner_v = a6.matmul(&lin(&[(b[12], &a6), (b[10], &a4), (b[8], &a2)]))?;
    let v = lin(&[
        (1.0, &inner_v),
        (b[6], &a6),
        (b[4], &a4),
        (b[2], &a2),
        (b[0], &id),
    ]);
    let p = v.add(&u)?;
    let q = v.sub(&u)?;
    let mut r = solve(&q, &p)?;
    for _ in 0..squarings {
        r = r.matmul(&r)?;
    }
    Ok(r)
}

/// Solves `a · x = b` by Gaussian elimination with partial pivoting.
pub(crate) fn solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(Error::Dimension {
            op: "solve",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let m = b.cols();
    let mut lu = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| lu.get(i, col).abs().total_cmp(&lu.get(j, col).abs()))
            .expect("non-empty range");
        if lu.get(pivot, col) == 0.0 {
            return Err(Error::contract("singular matrix in solve"));
        }
        if pivot != col {
            for j in 0..n {
                let t = lu.get(col, j);
                lu.set(col, j, lu.get(pivot, j));
                lu.set(pivot, j, t);
            }
            for j in 0..m {
                let t = x.get(col, j);
                x.set(col, j, x.get(pivot, j));
                x.set(pivot, j, t);
            }
        }
        let d = lu.get(col, col);
        for i in col + 1..n {
            let f = lu.get(i, col) / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                lu.set(i, j, lu.get(i, j) - f * lu.get(col, j));
            }
            for j in 0..m {
                x.set(i, j, x.get(i, j) - f * x.get(col, j));
            }
        }
    }
    for col in (0..n).rev() {
        let d = lu.get(col, col);
        for j in 0..m {
            let mut v = x.get(col, j);
            for k in col + 1..n {
                v -= lu.get(col, k) * x.get(k, j);
            }
            x.set(col, j, v / d);
        }
    }
    Ok(x)
}
