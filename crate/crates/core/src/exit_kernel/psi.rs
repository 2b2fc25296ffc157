use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::normal;
use crate::sde_models::{Constraint, ItoSystem};

/// Frozen drift and diffusion of the scalar constraint process `y = g_j(x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalCoefficients {
    /// Constraint value; safe iff `<= 0`.
    pub z: f64,
    /// Drift of `y` per second.
    pub h: f64,
    /// Diffusion magnitude per sqrt-second, `>= 0`.
    pub sigma: f64,
}

impl LocalCoefficients {
    pub fn exit_prob(&self, dt: f64) -> Result<f64> {
        psi(self.z, self.h, self.sigma, dt)
    }
}

/// Probability that `y(s) = z + h s + sigma W(s)` reaches `0` within `dt`.
///
/// `z >= 0` (already outside or on the boundary) returns 1. `sigma = 0`
/// returns the deterministic indicator `1(z + h dt > 0)`.
pub fn psi(z: f64, h: f64, sigma: f64, dt: f64) -> Result<f64> {
    if !(z.is_finite() && h.is_finite() && sigma.is_finite() && dt.is_finite()) {
        return Err(Error::invalid(format!("psi: non-finite input (z {z}, h {h}, sigma {sigma}, dt {dt})")));
    }
    if !(dt > 0.0) || sigma < 0.0 {
        return Err(Error::invalid(format!("psi: need dt > 0 and sigma >= 0 (sigma {sigma}, dt {dt})")));
    }
    Ok(psi_unchecked(z, h, sigma, dt))
}

/// `psi` for inputs already known to be finite with `dt > 0`, `sigma >= 0`.
pub(crate) fn psi_unchecked(z: f64, h: f64, sigma: f64, dt: f64) -> f64 {
    if z >= 0.0 {
        return 1.0;
    }
    let s = sigma * dt.sqrt();
    let var = sigma * sigma;
    if s < 1e-150 || var == 0.0 {
        return if z + h * dt > 0.0 { 1.0 } else { 0.0 };
    }
    let hdt = h * dt;
    let direct = normal::cdf((hdt + z) / s);
    // exp(-2hz/σ²) may overflow on its own; the product with the tail cannot exceed 1.
    let log_reflected = -2.0 * h * z / var + normal::ln_cdf((z - hdt) / s);
    let reflected = if log_reflected > 0.0 { 1.0 } else { log_reflected.exp() };
    (direct + reflected).clamp(0.0, 1.0)
}

/// Drift `h = aᵀf + ½ tr(Gᵀ H G)` and diffusion `‖aᵀG‖` of `g_j` at `(t, x, u)`.
pub fn local_coefficients(
    system: &dyn ItoSystem,
    constraint: &Constraint,
    t: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<LocalCoefficients> {
    let z = constraint.value(x);
    let a = constraint.gradient(x)?;
    let hess = constraint.hessian(x)?;
    let f = system.drift(t, x, u);
    let g = system.diffusion(t, x, u);
    let sigma = g.tr_mul(&a).norm();
    let curvature = if constraint.is_linear() { 0.0 } else { (g.transpose() * hess * &g).trace() };
    Ok(LocalCoefficients { z, h: a.dot(&f) + 0.5 * curvature, sigma })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde_models::{circle_obstacle, double_integrator_1d, dubins_system, halfplane_constraint, LinearSystem};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    #[test]
    fn boundary_start_always_exits() {
        for &(h, s) in &[(-3.0, 0.2), (0.0, 1.0), (5.0, 2.0)] {
            assert_eq!(psi(0.0, h, s, 0.1).unwrap(), 1.0);
        }
    }

    #[test]
    fn driftless_unit_case() {
        assert_relative_eq!(psi(-1.0, 0.0, 1.0, 1.0).unwrap(), 2.0 * normal::cdf(-1.0), epsilon = 1e-15);
        assert_relative_eq!(psi(-1.0, 0.0, 1.0, 1.0).unwrap(), 0.31731, epsilon = 1e-5);
    }

    #[test]
    fn far_boundary_is_negligible() {
        assert!(psi(-10.0, 0.0, 1.0, 0.01).unwrap() < 1e-12);
    }

    #[test]
    fn deterministic_branch() {
        assert_eq!(psi(-1.0, 2.0, 0.0, 1.0).unwrap(), 1.0);
        assert_eq!(psi(-1.0, 0.5, 0.0, 1.0).unwrap(), 0.0);
        assert_eq!(psi(-1.0, 1.0, 0.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn large_negative_exponent_product_stays_finite() {
        let p = psi(-1.0, -1e3, 1e-2, 1.0).unwrap();
        assert!(p.is_finite() && p < 1e-300);
        let q = psi(-1e-3, -50.0, 0.05, 0.5).unwrap();
        assert!((0.0..=1.0).contains(&q));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(psi(f64::NAN, 0.0, 1.0, 1.0).is_err());
        assert!(psi(-1.0, f64::INFINITY, 1.0, 1.0).is_err());
        assert!(psi(-1.0, 0.0, -1.0, 1.0).is_err());
        assert!(psi(-1.0, 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn halfplane_on_double_integrator() {
        let sys = double_integrator_1d(0.7).unwrap();
        let c = halfplane_constraint(&[1.0], 5.0).unwrap();
        let x = DVector::from_vec(vec![4.0, 2.0]);
        let lc = local_coefficients(&sys, &c, 0.0, &x, &DVector::zeros(1)).unwrap();
        assert_eq!(lc, LocalCoefficients { z: -1.0, h: 2.0, sigma: 0.0 });
    }

    #[test]
    fn radial_approach_to_circle() {
        let sys = dubins_system(1.0, 1e-4, 60.0).unwrap();
        let r = 0.5;
        let speed = 1.3;
        let c = circle_obstacle(&[1.0, -1.0], r).unwrap();
        // At distance 2r to the left of the center, moving right.
        let x = DVector::from_vec(vec![1.0 - 2.0 * r, -1.0, speed, 0.0, 0.0, 0.0]);
        let u = DVector::zeros(2);
        let lc = local_coefficients(&sys, &c, 0.0, &x, &u).unwrap();
        assert_relative_eq!(lc.z, -r, epsilon = 1e-15);
        assert_relative_eq!(lc.h, speed, epsilon = 1e-12);
        assert_eq!(lc.sigma, 0.0);

        // Finite-difference check of dg/dt along the drift.
        let eps = 1e-6;
        let f = sys.drift(0.0, &x, &u);
        let fd = (c.value(&(&x + &f * eps)) - c.value(&(&x - &f * eps))) / (2.0 * eps);
        assert_relative_eq!(lc.h, fd, epsilon = 1e-7);
    }

    #[test]
    fn constant_diffusion_row_norm() {
        let sys = LinearSystem::new(
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::from_row_slice(1, 2, &[0.3, 0.4]),
        )
        .unwrap();
        let c = halfplane_constraint(&[1.0], 2.0).unwrap();
        let lc = local_coefficients(&sys, &c, 0.0, &DVector::from_vec(vec![0.0]), &DVector::zeros(1)).unwrap();
        assert_relative_eq!(lc.sigma, 0.5, epsilon = 1e-15);
        assert_eq!(lc.h, 0.0);
    }

    #[test]
    fn circle_center_is_singular() {
        let sys = dubins_system(1.0, 1e-4, 60.0).unwrap();
        let c = circle_obstacle(&[0.0, 0.0], 1.0).unwrap();
        let x = DVector::zeros(6);
        assert!(matches!(
            local_coefficients(&sys, &c, 0.0, &x, &DVector::zeros(2)),
            Err(Error::SingularPoint(_))
        ));
    }
}
