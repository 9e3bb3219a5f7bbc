use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn sinusoidal_positions(len: usize, d_model: usize) -> Result<Matrix> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::config(format!(
            "sinusoidal positions need an even d_model, got {d_model}"
        )));
    }
    Ok(Matrix::from_fn(len, d_model, |p, c| {
        let i = (c / 2) as f64;
        let angle = p as f64 / 10_000f64.powf(2.0 * i / d_model as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}
