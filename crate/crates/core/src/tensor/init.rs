use crate::tensor::matrix::Matrix;
use crate::tensor::rng::RngState;

/// Glorot/Xavier uniform: entries drawn from `U(-b, b)` with `b = sqrt(6 / (rows + cols))`.
pub fn glorot_init(rows: usize, cols: usize, rng: &mut RngState) -> Matrix {
    assert!(
        rows >= 1 && cols >= 1,
        "glorot_init needs a non-empty shape"
    );
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rows, cols, -bound, bound, rng)
}

pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut RngState) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(lo, hi))
}
