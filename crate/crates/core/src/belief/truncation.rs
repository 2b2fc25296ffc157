use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::linalg::symmetrize;
use crate::normal;
use crate::sde_models::SafeSet;

use super::GaussianBelief;

/// Truncations retaining less than this mass are rejected as degenerate.
pub const MIN_RETAINED_MASS: f64 = 1e-12;

/// Projected variance below which a constraint is treated as deterministic.
const DETERMINISTIC_VAR: f64 = 1e-300;

/// Moment-matched Gaussian after conditioning on `value <= upper`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Truncated1d {
    pub mean: f64,
    pub var: f64,
    pub mass: f64,
}

pub fn truncate_gaussian_1d(mean: f64, var: f64, upper: f64) -> Result<Truncated1d> {
    if !(var > 0.0) || !var.is_finite() || !mean.is_finite() || upper.is_nan() {
        return Err(Error::invalid(format!(
            "truncate_gaussian_1d needs finite mean and var > 0 (mean {mean}, var {var}, upper {upper})"
        )));
    }
    if upper == f64::INFINITY {
        return Ok(Truncated1d { mean, var, mass: 1.0 });
    }
    let sd = var.sqrt();
    let alpha = (upper - mean) / sd;
    let mass = normal::cdf(alpha);
    if mass < MIN_RETAINED_MASS {
        return Err(Error::DegenerateTruncation { mass, threshold: MIN_RETAINED_MASS });
    }
    let lambda = normal::inverse_mills(alpha);
    let new_mean = mean - sd * lambda;
    let shrink = (1.0 - alpha * lambda - lambda * lambda).clamp(0.0, 1.0);
    Ok(Truncated1d { mean: new_mean, var: var * shrink, mass })
}

/// Sequentially conditions `belief` on `g_j(x) <= 0` for every constraint, in
/// list order, using a first-order projection of each constraint at the
/// current mean. Returns the updated belief and the product of retained masses.
pub fn condition_on_safety(belief: &GaussianBelief, safe_set: &SafeSet) -> Result<(GaussianBelief, f64)> {
    let n = belief.state_dim();
    let dim = belief.mean.len();
    let mut mean = belief.mean.clone();
    let mut cov = belief.cov.clone();
    let mut total_mass = 1.0;

    for constraint in &safe_set.constraints {
        let x = mean.rows(0, n).into_owned();
        let value = constraint.value(&x);
        let grad_state = constraint.gradient(&x)?;
        let mut a = DVector::zeros(dim);
        a.rows_mut(0, n).copy_from(&grad_state);

        let cov_a = &cov * &a;
        let var = a.dot(&cov_a);
        if var <= DETERMINISTIC_VAR {
            if value > 0.0 {
                return Err(Error::DegenerateTruncation { mass: 0.0, threshold: MIN_RETAINED_MASS });
            }
            continue;
        }
        let t = truncate_gaussian_1d(value, var, 0.0)?;
        total_mass *= t.mass;
        mean += &cov_a * ((t.mean - value) / var);
        cov -= &cov_a * cov_a.transpose() * ((var - t.var) / (var * var));
        symmetrize(&mut cov);
    }

    let out = GaussianBelief::augmented(mean, cov, belief.time, n)?;
    Ok((out, total_mass))
}
