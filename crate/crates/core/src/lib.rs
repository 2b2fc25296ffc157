//! Probability that a continuous-time stochastic system leaves its safe set
//! within a finite horizon.
//!
//! The crate provides interval-based first-exit estimators (`ival_safe`,
//! `ival_gauss`), the discrete-time baselines (`dt_booles`, `dt_gauss`), a
//! closed-loop Monte-Carlo oracle and an experiment runner.

pub mod belief;
pub mod cli;
pub mod error;
pub mod estimators;
pub mod exit_kernel;
pub mod linalg;
pub mod monte_carlo;
pub mod normal;
pub mod scenarios;
pub mod sde_models;

pub use error::{Error, Result};
