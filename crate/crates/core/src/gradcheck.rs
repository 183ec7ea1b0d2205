//! Central finite-difference gradient oracle (test support).
//!
//! The oracle never touches the backward pass it is checking: it only
//! re-evaluates the forward closure at perturbed leaf values and compares
//! the two-sided difference quotient against the analytic gradient.

use crate::error::Result;
use crate::tensor::Tensor;

/// Default step for 64-bit checks.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error floor: gradients smaller than this are compared
/// absolutely at the same tolerance.
const DENOM_FLOOR: f64 = 1e-3;

/// Compare analytic gradients of `build()` (a fresh scalar-loss graph over
/// the shared `params` leaves) against central finite differences with step
/// `h`. Returns the maximum relative error over all parameter elements.
///
/// `build` must be deterministic: any internal randomness has to be
/// re-seeded identically on every call.
pub fn finite_diff_check(
    params: &[&Tensor<f64>],
    h: f64,
    build: impl Fn() -> Result<Tensor<f64>>,
) -> Result<f64> {
    for p in params {
        p.zero_grad();
    }
    let loss = build()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut max_rel = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.numel() {
            let orig = p.data()[i];
            p.update_data(|d| d[i] = orig + h);
            let up = build()?.item();
            p.update_data(|d| d[i] = orig - h);
            let down = build()?.item();
            p.update_data(|d| d[i] = orig);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
