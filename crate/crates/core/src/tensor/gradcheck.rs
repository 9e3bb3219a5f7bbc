//! Central finite differences, the oracle for every reverse-mode gradient.

use crate::tensor::matrix::Matrix;

/// `(f(x + h e_ij) - f(x - h e_ij)) / 2h` for every entry.
pub fn finite_diff_grad(mut f: impl FnMut(&Matrix) -> f64, at: &Matrix, h: f64) -> Matrix {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut x = at.clone();
    let mut out = Matrix::zeros(at.rows(), at.cols());
    for idx in 0..at.data().len() {
        let orig = x.data()[idx];
        x.data_mut()[idx] = orig + h;
        let plus = f(&x);
        x.data_mut()[idx] = orig - h;
        let minus = f(&x);
        x.data_mut()[idx] = orig;
        out.data_mut()[idx] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Norm-wise relative error `‖a - b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let diff = a.sub(b).expect("gradient shapes agree").frobenius();
    let scale = a.frobenius().max(b.frobenius());
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}
