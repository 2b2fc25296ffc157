//! Scalar standard-normal helpers.

use libm::erfc;
use std::f64::consts::{PI, SQRT_2};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal density.
pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF, accurate in both tails.
pub fn cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * erfc(-x / SQRT_2)
}

/// Upper tail `1 - cdf(x)` without cancellation.
pub fn sf(x: f64) -> f64 {
    cdf(-x)
}

/// `ln cdf(x)`, finite for all finite `x`.
pub fn ln_cdf(x: f64) -> f64 {
    if x > -20.0 {
        return cdf(x).ln();
    }
    if x == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    // Asymptotic Mills-ratio expansion; the truncation error is below 1e-12 here.
    let x2 = x * x;
    let inv = 1.0 / x2;
    let series = 1.0 - inv + 3.0 * inv * inv - 15.0 * inv * inv * inv + 105.0 * inv.powi(4);
    -0.5 * x2 - (-x).ln() - LN_SQRT_2PI + series.ln()
}

/// Inverse Mills ratio `pdf(x) / cdf(x)`.
pub fn inverse_mills(x: f64) -> f64 {
    if x > -20.0 {
        pdf(x) / cdf(x)
    } else {
        (-0.5 * x * x - LN_SQRT_2PI - ln_cdf(x)).exp()
    }
}
