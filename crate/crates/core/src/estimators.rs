//! Risk estimates over a time partition: the discrete-time baselines
//! `dt_booles` and `dt_gauss`, and the interval estimators `ival_gauss` and
//! `ival_safe`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::{a_priori_beliefs, condition_on_safety, propagate_belief, GaussianBelief, LqgDesign};
use crate::error::{Error, Result};
use crate::exit_kernel::{interval_exit_prob, violation_probability, ExitMode, QuadratureSpec};
use crate::sde_models::{ItoSystem, SafeSet};

/// Relative tolerance when matching partition times.
const TIME_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    DtBooles,
    DtGauss,
    IvalGauss,
    IvalSafe,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::DtBooles, Method::DtGauss, Method::IvalGauss, Method::IvalSafe];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::DtBooles => "dt_booles",
            Method::DtGauss => "dt_gauss",
            Method::IvalGauss => "ival_gauss",
            Method::IvalSafe => "ival_safe",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method '{s}'")))
    }
}

/// Strictly increasing times `0 = t_0 < … < t_k = T`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimePartition {
    times: Vec<f64>,
}

impl TimePartition {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::invalid("a partition needs at least two times"));
        }
        if times[0] != 0.0 {
            return Err(Error::invalid(format!("partition must start at 0, got {}", times[0])));
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("partition times must be finite and strictly increasing"));
        }
        Ok(Self { times })
    }

    /// Steps of `dt` from 0; the last interval is shortened to end exactly at `horizon`.
    pub fn uniform(horizon: f64, dt: f64) -> Result<Self> {
        if !(horizon > 0.0) || !(dt > 0.0) || !horizon.is_finite() || !dt.is_finite() {
            return Err(Error::invalid(format!("need horizon > 0 and dt > 0 (horizon {horizon}, dt {dt})")));
        }
        let steps = (horizon / dt - TIME_TOL).ceil().max(1.0) as usize;
        let mut times: Vec<f64> = (0..steps).map(|i| i as f64 * dt).collect();
        times.push(horizon);
        Self::new(times)
    }

    pub fn from_rate(horizon: f64, hz: f64) -> Result<Self> {
        Self::uniform(horizon, 1.0 / hz)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn num_intervals(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn interval(&self, i: usize) -> (f64, f64) {
        (self.times[i], self.times[i + 1])
    }

    /// Fails unless the partition ends at `horizon`.
    pub fn check_horizon(&self, horizon: f64) -> Result<()> {
        if (self.horizon() - horizon).abs() > TIME_TOL * horizon.max(1.0) {
            return Err(Error::invalid(format!(
                "partition ends at {} but the horizon is {horizon}",
                self.horizon()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RiskReport {
    pub method: Method,
    /// `min(1, Σ per_interval)`.
    pub total: f64,
    /// Contribution of each interval `(t_i, t_{i+1}]`; nonnegative and unclamped.
    pub per_interval: Vec<f64>,
    /// `per_constraint[i][j]`: share of constraint `j` in interval `i`.
    pub per_constraint: Vec<Vec<f64>>,
    pub partition: TimePartition,
    /// Surviving (conditioned) mass at the start of each interval; `*_gauss` only.
    pub retained_mass: Option<Vec<f64>>,
    /// Set when a degenerate truncation forced the total to 1.
    pub saturated: bool,
}

impl RiskReport {
    fn assemble(
        method: Method,
        per_constraint: Vec<Vec<f64>>,
        per_interval: Vec<f64>,
        partition: TimePartition,
        retained_mass: Option<Vec<f64>>,
        saturated: bool,
    ) -> Self {
        let sum: f64 = per_interval.iter().sum();
        Self { method, total: sum.min(1.0), per_interval, per_constraint, partition, retained_mass, saturated }
    }

    /// Running sum of contributions at each interval end, clamped to 1.
    pub fn cumulative(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.per_interval
            .iter()
            .map(|c| {
                acc += c;
                acc.min(1.0)
            })
            .collect()
    }

    /// Unclamped `Σ per_interval`.
    pub fn raw_sum(&self) -> f64 {
        self.per_interval.iter().sum()
    }
}

fn check_aligned(beliefs: &[GaussianBelief], partition: &TimePartition) -> Result<()> {
    let times = partition.times();
    if beliefs.len() != times.len() {
        return Err(Error::MisalignedBeliefs(format!(
            "{} beliefs for {} partition times",
            beliefs.len(),
            times.len()
        )));
    }
    for (i, (b, &t)) in beliefs.iter().zip(times).enumerate() {
        if (b.time - t).abs() > TIME_TOL * t.abs().max(1.0) {
            return Err(Error::MisalignedBeliefs(format!("belief {i} is at t = {} but t_{i} = {t}", b.time)));
        }
    }
    Ok(())
}

/// Boole's inequality over partition points: `Σ_i Σ_j P(g_j(x(t_i)) > 0)` for
/// `i = 1..k`. The initial point is excluded; initial safety is a scenario invariant.
pub fn estimate_dt_booles(
    safe_set: &SafeSet,
    beliefs: &[GaussianBelief],
    partition: &TimePartition,
    spec: &QuadratureSpec,
) -> Result<RiskReport> {
    check_aligned(beliefs, partition)?;
    let per_constraint = beliefs[1..]
        .par_iter()
        .map(|b| {
            safe_set
                .constraints
                .iter()
                .map(|c| violation_probability(c, b, spec))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let per_interval = per_constraint.iter().map(|row| row.iter().sum()).collect();
    Ok(RiskReport::assemble(Method::DtBooles, per_constraint, per_interval, partition.clone(), None, false))
}

/// Interval exits of the a-priori belief restricted to the safe set.
///
/// `controls[i]` is the control frozen over interval `i`.
pub fn estimate_ival_safe(
    system: &dyn ItoSystem,
    safe_set: &SafeSet,
    beliefs: &[GaussianBelief],
    controls: &[DVector<f64>],
    partition: &TimePartition,
    spec: &QuadratureSpec,
) -> Result<RiskReport> {
    check_aligned(beliefs, partition)?;
    if controls.len() != partition.num_intervals() {
        return Err(Error::DimensionMismatch {
            context: "interval controls",
            expected: partition.num_intervals(),
            got: controls.len(),
        });
    }
    let per_constraint = (0..partition.num_intervals())
        .into_par_iter()
        .map(|i| {
            let (t0, t1) = partition.interval(i);
            interval_exit_prob(system, safe_set, &beliefs[i], &controls[i], t0, t1, spec, ExitMode::SafeWeighted)
                .map(|p| p.per_constraint)
        })
        .collect::<Result<Vec<_>>>()?;
    let per_interval = per_constraint.iter().map(|row| row.iter().sum()).collect();
    Ok(RiskReport::assemble(Method::IvalSafe, per_constraint, per_interval, partition.clone(), None, false))
}

/// Gaussian recursion shared by `dt_gauss` and `ival_gauss`.
///
/// `step(i, belief, survival)` returns the per-constraint contributions of
/// interval `i`, already scaled by `survival`, and the survival factor it implies
/// (`None` to take the truncation mass from the next conditioning).
fn gaussian_recursion(
    method: Method,
    system: &dyn ItoSystem,
    safe_set: &SafeSet,
    design: &LqgDesign,
    initial: &GaussianBelief,
    partition: &TimePartition,
    mut step: impl FnMut(usize, &GaussianBelief, f64) -> Result<(Vec<f64>, f64)>,
) -> Result<RiskReport> {
    partition.check_horizon(design.horizon())?;
    if initial.time != 0.0 {
        return Err(Error::MisalignedBeliefs(format!("initial belief is at t = {}", initial.time)));
    }
    let k = partition.num_intervals();
    let mut per_constraint = Vec::with_capacity(k);
    let mut per_interval = Vec::with_capacity(k);
    let mut retained = Vec::with_capacity(k);
    let mut saturated = false;
    let mut survival = 1.0;
    let mut conditioned = match condition_on_safety(initial, safe_set) {
        Ok((b, mass)) => {
            survival = mass;
            Some(b)
        }
        Err(Error::DegenerateTruncation { .. }) => None,
        Err(e) => return Err(e),
    };

    for i in 0..k {
        let Some(current) = conditioned.take() else {
            saturated = true;
            break;
        };
        retained.push(survival);
        let (row, factor) = step(i, &current, survival)?;
        per_interval.push(row.iter().sum::<f64>().max(0.0));
        per_constraint.push(row);
        if i + 1 == k {
            break;
        }
        let prior = propagate_belief(system, design, &current, partition.times()[i + 1])?;
        match condition_on_safety(&prior, safe_set) {
            Ok((b, mass)) => {
                survival *= if factor.is_nan() { mass } else { factor };
                conditioned = Some(b);
            }
            Err(Error::DegenerateTruncation { .. }) => {}
            Err(e) => return Err(e),
        }
    }

    if saturated {
        // The remaining mass is counted as failed and the total saturates.
        let sum: f64 = per_interval.iter().sum();
        let fill = (1.0 - sum).max(survival);
        let m = safe_set.len();
        per_interval.push(fill);
        per_constraint.push(vec![0.0; m]);
        retained.push(survival);
        while per_interval.len() < k {
            per_interval.push(0.0);
            per_constraint.push(vec![0.0; m]);
            retained.push(0.0);
        }
    }
    Ok(RiskReport::assemble(method, per_constraint, per_interval, partition.clone(), Some(retained), saturated))
}

/// Discrete-time baseline with safety conditioning and survival-product accounting:
/// interval `i` contributes `S_i p_i` with `S_{i+1} = S_i (1 − p_i)`, where `p_i`
/// is the union-bound violation probability at `t_{i+1}` under the propagated
/// conditioned belief.
pub fn estimate_dt_gauss(
    system: &dyn ItoSystem,
    safe_set: &SafeSet,
    design: &LqgDesign,
    initial: &GaussianBelief,
    partition: &TimePartition,
    spec: &QuadratureSpec,
) -> Result<RiskReport> {
    let times = partition.times().to_vec();
    gaussian_recursion(Method::DtGauss, system, safe_set, design, initial, partition, |i, current, survival| {
        let next = propagate_belief(system, design, current, times[i + 1])?;
        let probs = safe_set
            .constraints
            .iter()
            .map(|c| violation_probability(c, &next, spec))
            .collect::<Result<Vec<f64>>>()?;
        let p = probs.iter().sum::<f64>().min(1.0);
        let row = probs.iter().map(|q| survival * q).collect();
        Ok((row, 1.0 - p))
    })
}

/// Interval exits of the conditioned Gaussian, scaled by its retained mass.
pub fn estimate_ival_gauss(
    system: &dyn ItoSystem,
    safe_set: &SafeSet,
    design: &LqgDesign,
    initial: &GaussianBelief,
    partition: &TimePartition,
    spec: &QuadratureSpec,
) -> Result<RiskReport> {
    let times = partition.times().to_vec();
    gaussian_recursion(Method::IvalGauss, system, safe_set, design, initial, partition, |i, current, survival| {
        let control = design.nominal.control_at(times[i]);
        let p = interval_exit_prob(system, safe_set, current, control, times[i], times[i + 1], spec, ExitMode::Plain)?;
        Ok((p.per_constraint.iter().map(|q| survival * q).collect(), f64::NAN))
    })
}

/// Everything an estimator needs for one scenario.
#[derive(Clone, Copy, Debug)]
pub struct Problem<'a> {
    pub system: &'a dyn ItoSystem,
    pub safe_set: &'a SafeSet,
    pub design: &'a LqgDesign,
    /// Augmented `(x, x̂)` belief at `t = 0`.
    pub initial: &'a GaussianBelief,
    pub spec: &'a QuadratureSpec,
}

impl Problem<'_> {
    /// Runs `method` on `partition`; errors carry the method name.
    pub fn estimate(&self, method: Method, partition: &TimePartition) -> Result<RiskReport> {
        self.run(method, partition).map_err(|e| e.in_method(method.as_str()))
    }

    fn run(&self, method: Method, partition: &TimePartition) -> Result<RiskReport> {
        partition.check_horizon(self.design.horizon())?;
        match method {
            Method::DtBooles => {
                let beliefs = a_priori_beliefs(self.system, self.design, self.initial, partition.times())?;
                estimate_dt_booles(self.safe_set, &beliefs, partition, self.spec)
            }
            Method::IvalSafe => {
                let beliefs = a_priori_beliefs(self.system, self.design, self.initial, partition.times())?;
                let controls: Vec<_> = partition.times()[..partition.num_intervals()]
                    .iter()
                    .map(|&t| self.design.nominal.control_at(t).clone())
                    .collect();
                estimate_ival_safe(self.system, self.safe_set, &beliefs, &controls, partition, self.spec)
            }
            Method::DtGauss => {
                estimate_dt_gauss(self.system, self.safe_set, self.design, self.initial, partition, self.spec)
            }
            Method::IvalGauss => {
                estimate_ival_gauss(self.system, self.safe_set, self.design, self.initial, partition, self.spec)
            }
        }
    }
}
