use thiserror::Error;

/// Errors surfaced by the risk estimators, simulators and scenario tooling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("constraint is singular at the queried point ({0})")]
    SingularPoint(String),

    #[error("degenerate truncation: retained mass {mass:e} is below {threshold:e}")]
    DegenerateTruncation { mass: f64, threshold: f64 },

    #[error("covariance lost positive semidefiniteness (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },

    #[error("Riccati recursion diverged at tick {tick} (norm {norm:e})")]
    RiccatiDivergence { tick: usize, norm: f64 },

    #[error("invalid quadrature reduction: {0}")]
    InvalidReduction(String),

    #[error("beliefs are not aligned with the partition: {0}")]
    MisalignedBeliefs(String),

    #[error("simulation blew up in rollout {rollout} at t = {time}")]
    SimulationBlowup { rollout: usize, time: f64 },

    #[error("nominal trajectory is in collision at t = {time} (constraint {constraint}, g = {value})")]
    NominalInCollision {
        time: f64,
        constraint: usize,
        value: f64,
    },

    #[error("scenario validation failed [{check}]: {detail}")]
    ScenarioInvalid { check: &'static str, detail: String },

    #[error("template infeasible: {retained} of {examined} candidates retained ({reason})")]
    TemplateInfeasible {
        retained: usize,
        examined: usize,
        reason: String,
    },

    #[error("batch aborted: {failed} of {total} scenarios failed")]
    BatchAborted { failed: usize, total: usize },

    #[error("{method} failed: {source}")]
    Method {
        method: String,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn in_method(self, method: impl Into<String>) -> Self {
        Error::Method {
            method: method.into(),
            source: Box::new(self),
        }
    }
}
