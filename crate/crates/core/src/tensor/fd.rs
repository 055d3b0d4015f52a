//! Central-difference gradient oracle.

use crate::error::{Error, Result};
use crate::tensor::TensorData;

/// Gradient of `f` at `theta` by central differences, coordinate by
/// coordinate: (f(θ+εe_i) − f(θ−εe_i)) / 2ε. Used only to check the tape;
/// cost is two forward evaluations per coordinate.
pub fn finite_diff_grad<F>(mut f: F, theta: &TensorData, eps: f64) -> Result<TensorData>
where
    F: FnMut(&TensorData) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!(
            "finite_diff_grad: step must be positive, got {eps}"
        )));
    }
    let mut probe = theta.clone();
    let mut grad = vec![0.0; theta.numel()];
    for i in 0..theta.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let hi = f(&probe)?;
        probe.data[i] = orig - eps;
        let lo = f(&probe)?;
        probe.data[i] = orig;
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    TensorData::new(theta.shape.clone(), grad)
}
