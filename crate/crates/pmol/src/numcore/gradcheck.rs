//! Finite-difference gradient oracle.
//!
//! Central differences, kept independent of the tape machinery so it can
//! cross-check the analytic backward rules.

use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;

/// Central-difference gradient of a scalar-valued function at `x`.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let mut grad = vec![0.0; x.len()];
    let base = x.values().to_vec();
    for i in 0..x.len() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] += eps;
        minus[i] -= eps;
        let fp = eval_scalar(&f, x.shape().to_vec(), plus)?;
        let fm = eval_scalar(&f, x.shape().to_vec(), minus)?;
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), grad))
}

fn eval_scalar<F>(f: &F, shape: Vec<usize>, vals: Vec<f64>) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let out = f(&Tensor::new(shape, vals)?)?;
    if out.len() != 1 {
        return Err(Error::Contract(format!(
            "finite_difference_gradient: f returned shape {:?}, expected scalar",
            out.shape()
        )));
    }
    Ok(out.item())
}

/// Max relative error between analytic and numeric gradients, with an
/// absolute floor so near-zero components do not blow up the ratio.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
