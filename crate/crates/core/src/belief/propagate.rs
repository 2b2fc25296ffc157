use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{self, symmetrize};
use crate::sde_models::ItoSystem;

use super::{GaussianBelief, LqgDesign};

/// Propagates an augmented `(x, x̂)` belief from `belief.time` to `t_to`.
///
/// The belief is tracked in deviation coordinates about the nominal. Between
/// ticks the plant evolves under the held control and the estimate is frozen;
/// at each tick crossed (including `t_to` when it is a tick) the Kalman update
/// is applied, so beliefs on grid times are post-observation.
pub fn propagate_belief(
    system: &dyn ItoSystem,
    design: &LqgDesign,
    belief: &GaussianBelief,
    t_to: f64,
) -> Result<GaussianBelief> {
    let n = design.state_dim();
    if belief.state_dim() != n || belief.mean.len() != 2 * n {
        return Err(Error::invalid("propagate_belief needs an augmented (x, x̂) belief"));
    }
    let nominal = &design.nominal;
    let horizon = nominal.horizon();
    let t_from = belief.time;
    if !(t_to >= t_from) || t_to > horizon + 1e-9 * horizon.max(1.0) {
        return Err(Error::invalid(format!(
            "cannot propagate from t = {t_from} to t = {t_to} (horizon {horizon})"
        )));
    }

    let nom_from = nominal.state_at(system, t_from);
    let mut dev = belief.mean.clone();
    for i in 0..n {
        dev[i] -= nom_from[i];
        dev[n + i] -= nom_from[i];
    }
    let mut cov = belief.cov.clone();
    let eye = DMatrix::<f64>::identity(n, n);

    let mut tau = t_from;
    let eps = 1e-9 * nominal.tick;
    while tau < t_to - eps {
        let (k, on_grid) = nominal.locate(tau);
        let tick_end = nominal.tick_time(k + 1);
        let next = if t_to < tick_end - eps { t_to } else { tick_end };
        let lin = &design.linearization[k];
        let gain = &design.lqr_gains[k];

        let full_tick = on_grid && (next - tick_end).abs() <= eps;
        let (phi, gamma, q) = if full_tick {
            (lin.transition.clone(), lin.input.clone(), lin.process_cov.clone())
        } else {
            lin.partial(next - tau)
        };

        // Plant step with the held control, estimator frozen.
        let mut t_mat = DMatrix::<f64>::identity(2 * n, 2 * n);
        t_mat.view_mut((0, 0), (n, n)).copy_from(&phi);
        t_mat.view_mut((0, n), (n, n)).copy_from(&(-(&gamma * gain)));
        dev = &t_mat * dev;
        cov = &t_mat * cov * t_mat.transpose();
        {
            let mut block = cov.view_mut((0, 0), (n, n));
            block += &q;
        }

        if (next - tick_end).abs() <= eps {
            // Observation at tick k + 1.
            let l = &design.kalman_gains[k + 1];
            let mut u_mat = DMatrix::<f64>::identity(2 * n, 2 * n);
            u_mat.view_mut((n, 0), (n, n)).copy_from(l);
            u_mat
                .view_mut((n, n), (n, n))
                .copy_from(&((&eye - l) * design.estimator_prediction(k)));
            dev = &u_mat * dev;
            cov = &u_mat * cov * u_mat.transpose();
            let meas = l * &design.observation_cov * l.transpose();
            let mut block = cov.view_mut((n, n), (n, n));
            block += &meas;
        }
        symmetrize(&mut cov);
        tau = next;
    }
    linalg::check_psd(&cov)?;

    let nom_to = nominal.state_at(system, t_to);
    let mut mean = dev;
    for i in 0..n {
        mean[i] += nom_to[i];
        mean[n + i] += nom_to[i];
    }
    GaussianBelief::augmented(mean, cov, t_to, n)
}

/// A-priori closed-loop beliefs at each of `times`, starting from `initial`.
pub fn a_priori_beliefs(
    system: &dyn ItoSystem,
    design: &LqgDesign,
    initial: &GaussianBelief,
    times: &[f64],
) -> Result<Vec<GaussianBelief>> {
    let mut out: Vec<GaussianBelief> = Vec::with_capacity(times.len());
    let mut current = initial.clone();
    for &t in times {
        if (t - current.time).abs() > 1e-12 {
            current = propagate_belief(system, design, &current, t)?;
        }
        out.push(current.clone());
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use crate::belief::{design_lqg, LqgWeights, NominalTrajectory};
    use crate::sde_models::{double_integrator_1d, LinearSystem};
    use approx::assert_relative_eq;

    fn brownian(sigma: f64) -> LinearSystem {
        LinearSystem::new(DMatrix::zeros(1, 1), DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, sigma))
            .unwrap()
            .with_control_rate(10.0)
            .unwrap()
    }

    #[test]
    fn open_loop_brownian_variance_grows_linearly() {
        let sys = brownian(0.4);
        let nominal = NominalTrajectory::from_controls(&sys, DVector::zeros(1), vec![DVector::zeros(1); 10]).unwrap();
        let design = design_lqg(&sys, &nominal, &LqgWeights::new(vec![0.0], vec![1.0]), &DMatrix::zeros(1, 1), 1.0).unwrap();
        let b0 = design.initial_belief(&DVector::zeros(1)).unwrap();
        let mut b = b0;
        for k in 1..=10 {
            b = propagate_belief(&sys, &design, &b, k as f64 * 0.1).unwrap();
            assert_relative_eq!(b.cov[(0, 0)], 0.16 * 0.1 * k as f64, epsilon = 1e-14);
        }
        // Off-grid time.
        let mid = propagate_belief(&sys, &design, &design.initial_belief(&DVector::zeros(1)).unwrap(), 0.137).unwrap();
        assert_relative_eq!(mid.cov[(0, 0)], 0.16 * 0.137, epsilon = 1e-14);
    }

    #[test]
    fn noiseless_identity_drift_keeps_covariance() {
        let sys = LinearSystem::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 1), DMatrix::zeros(2, 1))
            .unwrap()
            .with_observation_cov(DMatrix::identity(2, 2))
            .unwrap();
        let nominal = NominalTrajectory::from_controls(&sys, DVector::zeros(2), vec![DVector::zeros(1); 30]).unwrap();
        let s0 = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.2]);
        let design = design_lqg(&sys, &nominal, &LqgWeights::new(vec![1.0, 1.0], vec![1.0]), &s0, 0.5).unwrap();
        let b0 = design.initial_belief(&DVector::zeros(2)).unwrap();
        let b = propagate_belief(&sys, &design, &b0, 0.5).unwrap();
        assert_relative_eq!(b.state_cov(), s0, epsilon = 1e-14);
    }

    #[test]
    fn splitting_a_tick_matches_a_single_step() {
        let sys = double_integrator_1d(0.3).unwrap();
        let nominal = NominalTrajectory::from_controls(&sys, DVector::from_vec(vec![0.0, 1.0]), vec![DVector::from_element(1, 0.2); 60]).unwrap();
        let design = design_lqg(&sys, &nominal, &LqgWeights::new(vec![5.0, 1.0], vec![1.0]), &(DMatrix::identity(2, 2) * 1e-3), 1.0).unwrap();
        let b0 = design.initial_belief(&DVector::from_vec(vec![0.01, 1.0])).unwrap();
        let direct = propagate_belief(&sys, &design, &b0, 0.5).unwrap();
        let mut b = b0.clone();
        for t in [0.013, 0.1, 0.25, 0.2501, 0.4, 0.5] {
            b = propagate_belief(&sys, &design, &b, t).unwrap();
        }
        assert_relative_eq!(direct.cov, b.cov, epsilon = 1e-12);
        assert_relative_eq!(direct.mean, b.mean, epsilon = 1e-9);
    }

    #[test]
    fn rejects_backwards_and_non_augmented() {
        let sys = brownian(0.1);
        let nominal = NominalTrajectory::from_controls(&sys, DVector::zeros(1), vec![DVector::zeros(1); 10]).unwrap();
        let design = design_lqg(&sys, &nominal, &LqgWeights::new(vec![0.0], vec![1.0]), &DMatrix::zeros(1, 1), 1.0).unwrap();
        let b = design.initial_belief(&DVector::zeros(1)).unwrap();
        let later = propagate_belief(&sys, &design, &b, 0.5).unwrap();
        assert!(propagate_belief(&sys, &design, &later, 0.2).is_err());
        let plain = GaussianBelief::new(DVector::zeros(1), DMatrix::zeros(1, 1), 0.0).unwrap();
        assert!(propagate_belief(&sys, &design, &plain, 0.2).is_err());
    }
}
