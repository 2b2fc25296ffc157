#![allow(dead_code)]

pub mod props;

use exitrisk::belief::{design_lqg, GaussianBelief, LqgDesign, LqgWeights, NominalTrajectory};
use exitrisk::sde_models::{double_integrator_1d, halfplane_constraint, LinearSystem, SafeSet};
use nalgebra::{DMatrix, DVector};

/// Double integrator coasting toward a wall at `p = wall`, under LQG tracking.
pub struct WallFixture {
    pub system: LinearSystem,
    pub safe_set: SafeSet,
    pub design: LqgDesign,
    pub initial: GaussianBelief,
}

pub fn wall_fixture(noise: f64, speed: f64, wall: f64, horizon: f64, rate: f64, init_var: f64) -> WallFixture {
    let system = double_integrator_1d(noise).unwrap().with_control_rate(rate).unwrap();
    let ticks = (horizon * rate).round() as usize;
    let x0 = DVector::from_vec(vec![0.0, speed]);
    let nominal = NominalTrajectory::from_controls(&system, x0.clone(), vec![DVector::zeros(1); ticks]).unwrap();
    let init_cov = DMatrix::identity(2, 2) * init_var;
    let design = design_lqg(&system, &nominal, &LqgWeights::new(vec![10.0, 1.0], vec![1.0]), &init_cov, horizon).unwrap();
    let initial = design.initial_belief(&x0).unwrap();
    let safe_set = SafeSet::new(vec![halfplane_constraint(&[1.0], wall).unwrap()]);
    WallFixture { system, safe_set, design, initial }
}
