//! Stochastic plant models and state constraints.

mod constraint;
mod systems;

pub use constraint::{circle_obstacle, halfplane_constraint, Constraint, SafeSet, Shape};
pub use systems::{
    double_integrator_1d, dubins_system, integrate_deterministic, DubinsCar, ItoSystem, LinearSystem, Workspace,
};
