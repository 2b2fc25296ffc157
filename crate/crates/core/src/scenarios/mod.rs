//! Scenario files, nominal synthesis and random batch generation.
//!
//! A scenario is a JSON document with the top-level keys `system`,
//! `obstacles`, `initial`, `goal`, `horizon_s`, `partition_hz`, `nominal`,
//! and the optional `risk_tolerance` and `lqg`. Lengths are in meters, times
//! in seconds and angles in radians.

mod batch;
mod nominal;

pub use batch::{generate_batch, BatchTemplate, GeneratedBatch, INTERESTING_MIN_RISK};
pub use nominal::{check_nominal_clearance, synthesize_nominal};

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::belief::{design_lqg, GaussianBelief, LqgDesign, LqgWeights, NominalTrajectory};
use crate::error::{Error, Result};
use crate::estimators::{Problem, TimePartition};
use crate::exit_kernel::{violation_probability, QuadratureSpec, Reduction};
use crate::linalg;
use crate::sde_models::{double_integrator_1d, dubins_system, Constraint, ItoSystem, SafeSet, Shape};

/// Largest admissible `P(x₀ ∉ X_safe)`.
pub const MAX_INITIAL_RISK: f64 = 1e-6;

fn default_obs_noise_var() -> f64 {
    1e-4
}

fn default_control_rate() -> f64 {
    60.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemSpec {
    Dubins {
        noise_scale: f64,
        #[serde(default = "default_obs_noise_var")]
        obs_noise_var: f64,
        #[serde(default = "default_control_rate")]
        control_rate_hz: f64,
    },
    DoubleIntegrator1d {
        noise: f64,
        #[serde(default = "default_obs_noise_var")]
        obs_noise_var: f64,
        #[serde(default = "default_control_rate")]
        control_rate_hz: f64,
    },
}

impl SystemSpec {
    pub fn build(&self) -> Result<Box<dyn ItoSystem>> {
        Ok(match *self {
            SystemSpec::Dubins { noise_scale, obs_noise_var, control_rate_hz } => {
                Box::new(dubins_system(noise_scale, obs_noise_var, control_rate_hz)?)
            }
            SystemSpec::DoubleIntegrator1d { noise, obs_noise_var, control_rate_hz } => {
                if !(obs_noise_var >= 0.0) {
                    return Err(Error::invalid(format!("obs_noise_var must be >= 0, got {obs_noise_var}")));
                }
                Box::new(
                    double_integrator_1d(noise)?
                        .with_control_rate(control_rate_hz)?
                        .with_observation_cov(DMatrix::identity(2, 2) * obs_noise_var)?,
                )
            }
        })
    }

    pub fn control_rate_hz(&self) -> f64 {
        match *self {
            SystemSpec::Dubins { control_rate_hz, .. } | SystemSpec::DoubleIntegrator1d { control_rate_hz, .. } => {
                control_rate_hz
            }
        }
    }

    /// Default LQR weights `(state, control)`.
    fn default_weights(&self) -> LqgWeights {
        match self {
            SystemSpec::Dubins { .. } => LqgWeights::new(vec![10.0, 10.0, 1.0, 1.0, 1.0, 0.1], vec![1.0, 1.0]),
            SystemSpec::DoubleIntegrator1d { .. } => LqgWeights::new(vec![10.0, 1.0], vec![1.0]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub mean: Vec<f64>,
    /// Row-major covariance.
    pub cov: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NominalSpec {
    /// Track a smooth path from the initial position through `waypoints` to the goal.
    Kinematic {
        #[serde(default)]
        waypoints: Vec<Vec<f64>>,
    },
    /// Coast from the initial mean with zero control.
    ZeroControl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqgSpec {
    /// Diagonal state weights.
    pub q: Vec<f64>,
    /// Diagonal control weights.
    pub r: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub system: SystemSpec,
    pub obstacles: Vec<Shape>,
    pub initial: InitialSpec,
    pub goal: Vec<f64>,
    pub horizon_s: f64,
    pub partition_hz: f64,
    pub nominal: NominalSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk_tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lqg: Option<LqgSpec>,
}

fn scenario_error(check: &'static str, detail: impl Into<String>) -> Error {
    Error::ScenarioInvalid { check, detail: detail.into() }
}

/// Reads and fully validates a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let scenario = Scenario::from_json(&text).map_err(|e| match e {
        Error::Parse { message, .. } => Error::Parse { path: path.display().to_string(), message },
        other => other,
    })?;
    Ok(scenario)
}

pub fn save_scenario(scenario: &Scenario, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, scenario.to_json()?)?;
    Ok(())
}

impl Scenario {
    /// Parses and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let scenario: Scenario = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<string>".into(),
            message: format!("line {}, column {}: {e}", e.line(), e.column()),
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse { path: "<scenario>".into(), message: e.to_string() })
    }

    pub fn initial_mean(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.initial.mean)
    }

    pub fn initial_cov(&self) -> DMatrix<f64> {
        let n = self.initial.cov.len();
        DMatrix::from_fn(n, n, |i, j| self.initial.cov[i].get(j).copied().unwrap_or(f64::NAN))
    }

    pub fn build_system(&self) -> Result<Box<dyn ItoSystem>> {
        self.system.build()
    }

    pub fn safe_set(&self) -> Result<SafeSet> {
        let constraints = self
            .obstacles
            .iter()
            .map(|s| Constraint::from_shape(s.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(SafeSet::new(constraints))
    }

    pub fn lqg_weights(&self) -> LqgWeights {
        match &self.lqg {
            Some(spec) => LqgWeights::new(spec.q.clone(), spec.r.clone()),
            None => self.system.default_weights(),
        }
    }

    pub fn partition(&self) -> Result<TimePartition> {
        TimePartition::from_rate(self.horizon_s, self.partition_hz)
    }

    /// Number of control ticks in the horizon.
    pub fn num_ticks(&self) -> Result<usize> {
        let ticks = self.horizon_s * self.system.control_rate_hz();
        let rounded = ticks.round();
        if (ticks - rounded).abs() > 1e-9 * ticks.max(1.0) || rounded < 1.0 {
            return Err(scenario_error(
                "horizon",
                format!("horizon {} s is not a whole number of control ticks", self.horizon_s),
            ));
        }
        Ok(rounded as usize)
    }

    /// Checks every invariant, including `P(x₀ ∉ X_safe) < 1e-6`.
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon_s > 0.0) || !self.horizon_s.is_finite() {
            return Err(scenario_error("horizon", format!("horizon_s must be > 0, got {}", self.horizon_s)));
        }
        if !(self.partition_hz > 0.0) || !self.partition_hz.is_finite() {
            return Err(scenario_error("partition", format!("partition_hz must be > 0, got {}", self.partition_hz)));
        }
        if let Some(delta) = self.risk_tolerance {
            if !(delta > 0.0 && delta < 1.0) {
                return Err(scenario_error("risk_tolerance", format!("must lie in (0, 1), got {delta}")));
            }
        }
        let system = self.build_system().map_err(|e| scenario_error("system", e.to_string()))?;
        self.num_ticks()?;
        let n = system.state_dim();
        let ws_dim = system.workspace().map(|w| w.dim()).unwrap_or(0);

        if self.initial.mean.len() != n {
            return Err(scenario_error("initial", format!("mean has {} entries, the state has {n}", self.initial.mean.len())));
        }
        if self.initial.cov.len() != n || self.initial.cov.iter().any(|row| row.len() != n) {
            return Err(scenario_error("initial", format!("cov must be {n} x {n}")));
        }
        let cov = self.initial_cov();
        if self.initial.mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(scenario_error("initial", "non-finite entries"));
        }
        if !linalg::is_symmetric(&cov, 1e-12) {
            return Err(scenario_error("initial", "cov is not symmetric"));
        }
        linalg::check_psd(&cov).map_err(|e| scenario_error("initial", e.to_string()))?;
        if self.goal.len() != ws_dim {
            return Err(scenario_error("goal", format!("goal has {} entries, the workspace has {ws_dim}", self.goal.len())));
        }
        for (i, shape) in self.obstacles.iter().enumerate() {
            if shape.workspace_dim() != ws_dim {
                return Err(scenario_error("obstacles", format!("obstacle {i} is not {ws_dim}-dimensional")));
            }
        }
        let safe_set = self.safe_set().map_err(|e| scenario_error("obstacles", e.to_string()))?;
        if let NominalSpec::Kinematic { waypoints } = &self.nominal {
            if waypoints.iter().any(|w| w.len() != ws_dim || w.iter().any(|v| !v.is_finite())) {
                return Err(scenario_error("nominal", format!("waypoints must be finite {ws_dim}-vectors")));
            }
        }
        if let Some(lqg) = &self.lqg {
            if lqg.q.len() != n || lqg.r.len() != system.control_dim() {
                return Err(scenario_error("lqg", "weight lengths do not match the system"));
            }
        }

        let belief = GaussianBelief::new(self.initial_mean(), cov, 0.0)?;
        let spec = QuadratureSpec::default();
        let mut risk = 0.0;
        for c in &safe_set.constraints {
            risk += violation_probability(c, &belief, &spec)?;
        }
        if !(risk < MAX_INITIAL_RISK) {
            return Err(scenario_error(
                "initial_safety",
                format!("P(x0 unsafe) <= {risk:.3e} is not below {MAX_INITIAL_RISK:e}"),
            ));
        }
        Ok(())
    }

    /// Builds the system, nominal, LQG design and initial belief.
    pub fn instantiate(&self) -> Result<ScenarioInstance> {
        self.validate()?;
        let system = self.build_system()?;
        let safe_set = self.safe_set()?;
        let nominal = synthesize_nominal(self, system.as_ref())?;
        let initial_mean = self.initial_mean();
        let design = design_lqg(system.as_ref(), &nominal, &self.lqg_weights(), &self.initial_cov(), self.horizon_s)?;
        let initial_belief = design.initial_belief(&initial_mean)?;
        let quadrature = default_quadrature(system.as_ref(), &initial_mean, &nominal);
        Ok(ScenarioInstance {
            partition: self.partition()?,
            system,
            safe_set,
            design,
            initial_mean,
            initial_belief,
            quadrature,
        })
    }
}

/// `position_only` when the system has a workspace with noiseless position
/// rows, otherwise `full`.
pub fn default_quadrature(system: &dyn ItoSystem, x: &DVector<f64>, nominal: &NominalTrajectory) -> QuadratureSpec {
    let reduction = match system.workspace() {
        Some(ws) => {
            let g = system.diffusion(0.0, x, &nominal.controls[0]);
            if ws.position.iter().all(|&p| g.row(p).amax() == 0.0) {
                Reduction::PositionOnly
            } else {
                Reduction::PositionPlusScalarDrift
            }
        }
        None => Reduction::Full,
    };
    QuadratureSpec::new(reduction)
}

/// A scenario ready for estimation and simulation.
#[derive(Debug)]
pub struct ScenarioInstance {
    pub system: Box<dyn ItoSystem>,
    pub safe_set: SafeSet,
    pub design: LqgDesign,
    pub initial_mean: DVector<f64>,
    pub initial_belief: GaussianBelief,
    pub partition: TimePartition,
    pub quadrature: QuadratureSpec,
}

impl ScenarioInstance {
    pub fn problem<'a>(&'a self, spec: &'a QuadratureSpec) -> Problem<'a> {
        Problem {
            system: self.system.as_ref(),
            safe_set: &self.safe_set,
            design: &self.design,
            initial: &self.initial_belief,
            spec,
        }
    }
}
