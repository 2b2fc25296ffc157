//! Gaussian beliefs over the closed-loop (plant, estimator) state, LQG design
//! and the safety-conditioned ("anthropic") Gaussian recursion.

mod lqg;
mod propagate;
mod truncation;

pub use lqg::{design_lqg, LqgDesign, LqgWeights, NominalTrajectory, TickModel};
pub use propagate::{a_priori_beliefs, propagate_belief};
pub use truncation::{condition_on_safety, truncate_gaussian_1d, Truncated1d, MIN_RETAINED_MASS};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Gaussian over either the plant state alone or the augmented `(x, x̂)` pair.
///
/// The first `state_dim` coordinates are always the plant state; the marginal
/// over them is the a-priori state belief at `time`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub time: f64,
    state_dim: usize,
}

impl GaussianBelief {
    /// Plain (non-augmented) state belief.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, time: f64) -> Result<Self> {
        let n = mean.len();
        Self::augmented(mean, cov, time, n)
    }

    /// Belief whose first `state_dim` coordinates are the plant state.
    pub fn augmented(mean: DVector<f64>, cov: DMatrix<f64>, time: f64, state_dim: usize) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::DimensionMismatch {
                context: "belief covariance",
                expected: mean.len(),
                got: cov.nrows(),
            });
        }
        if state_dim == 0 || state_dim > mean.len() {
            return Err(Error::invalid("belief state_dim out of range"));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("belief contains non-finite entries"));
        }
        Ok(Self { mean, cov, time, state_dim })
    }

    /// Dirac measure at `x`.
    pub fn point_mass(x: DVector<f64>, time: f64) -> Self {
        let n = x.len();
        Self { mean: x, cov: DMatrix::zeros(n, n), time, state_dim: n }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn is_augmented(&self) -> bool {
        self.mean.len() > self.state_dim
    }

    pub fn state_mean(&self) -> DVector<f64> {
        self.mean.rows(0, self.state_dim).into_owned()
    }

    pub fn state_cov(&self) -> DMatrix<f64> {
        self.cov.view((0, 0), (self.state_dim, self.state_dim)).into_owned()
    }

    /// Symmetric to 1e-10 and PSD up to the numerical slack.
    pub fn validate(&self) -> Result<()> {
        if !linalg::is_symmetric(&self.cov, 1e-10) {
            return Err(Error::invalid("belief covariance is not symmetric"));
        }
        linalg::check_psd(&self.cov)
    }
}
