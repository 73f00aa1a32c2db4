//! Central finite-difference gradient oracle.
//!
//! Deliberately independent of the tape: it only re-evaluates a black-box
//! tensor-to-scalar function, so it can falsify any analytic backward pass.

use crate::error::Result;
use crate::tensor::Tensor;

/// Central-difference estimate (f(x + eps*e_i) - f(x - eps*e_i)) / (2 eps)
/// for every coordinate of `x`.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    assert!(eps > 0.0, "finite_diff_grad: eps must be positive");
    let mut grad = vec![0.0; x.len()];
    let base = x.data().to_vec();
    for i in 0..x.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let fp = f(&Tensor::new(x.shape().to_vec(), plus)?)?;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fm = f(&Tensor::new(x.shape().to_vec(), minus)?)?;
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Relative-error comparison with an absolute floor near zero, the
/// convention used by every gradient check in this workspace.
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor, abs_floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.data().iter().zip(numeric.data().iter()) {
        let denom = a.abs().max(n.abs());
        let diff = (a - n).abs();
        if diff <= abs_floor {
            continue;
        }
        worst = worst.max(diff / denom.max(abs_floor));
    }
    worst
}
