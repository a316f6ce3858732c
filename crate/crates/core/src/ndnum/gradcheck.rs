//! Central finite-difference gradient checking.
//!
//! Always runs in 64-bit. The loss closure must be deterministic: dropout off,
//! latent codes held fixed, no fresh rng draws inside.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Relative error between an analytic and a finite-difference gradient value,
/// guarded against both being near zero.
pub fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / (analytic.abs() + fd.abs()).max(1e-8)
}

/// Checks `analytic_grad` against central finite differences of `loss` at
/// `params`, probing `probes` coordinates (all of them when `probes >= len`).
///
/// Returns the maximum relative error over the probed coordinates.
pub fn grad_check<F>(
    mut loss: F,
    params: &[f64],
    analytic_grad: &[f64],
    eps: f64,
    probes: usize,
    rng: &mut Rng,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic_grad.len() {
        return Err(Error::Shape {
            context: "grad_check",
            expected: format!("{} gradient entries", params.len()),
            actual: format!("{}", analytic_grad.len()),
        });
    }
    if params.is_empty() {
        return Err(Error::EmptyInput("grad_check: no parameters"));
    }
    let coords: Vec<usize> = if probes >= params.len() {
        (0..params.len()).collect()
    } else {
        sample(rng, params.len(), probes).into_iter().collect()
    };
    let mut work = params.to_vec();
    let mut max_rel = 0.0_f64;
    for &i in &coords {
        let orig = work[i];
        work[i] = orig + eps;
        let plus = loss(&work);
        work[i] = orig - eps;
        let minus = loss(&work);
        work[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at probe coordinate {i}"
            )));
        }
        let fd = (plus - minus) / (2.0 * eps);
        max_rel = max_rel.max(relative_error(analytic_grad[i], fd));
    }
    Ok(max_rel)
}
