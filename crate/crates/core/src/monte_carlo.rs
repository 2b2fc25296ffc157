//! Closed-loop Monte-Carlo oracle: Euler–Maruyama rollouts of the plant under
//! the LQG tracking controller, with first-exit detection at every substep.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::belief::LqgDesign;
use crate::error::{Error, Result};
use crate::estimators::TimePartition;
use crate::linalg;
use crate::sde_models::{ItoSystem, SafeSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct McConfig {
    pub num_rollouts: usize,
    /// Euler–Maruyama steps per control tick; exits are checked after each.
    pub substeps: usize,
    pub seed: u64,
}

impl McConfig {
    pub fn new(num_rollouts: usize, seed: u64) -> Self {
        Self { num_rollouts, substeps: 10, seed }
    }

    pub fn with_substeps(mut self, substeps: usize) -> Self {
        self.substeps = substeps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_rollouts == 0 || self.substeps == 0 {
            return Err(Error::invalid("num_rollouts and substeps must both be >= 1"));
        }
        Ok(())
    }
}

/// Independent child seed for job `index` (splitmix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for rollout `index` under `seed`.
pub fn rollout_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutOutcome {
    /// First time the state left the safe set.
    pub exit_time: Option<f64>,
    /// Index of the first violated constraint at the exit.
    pub exit_constraint: Option<usize>,
    /// State at the exit, or at the horizon.
    pub final_state: DVector<f64>,
}

impl RolloutOutcome {
    pub fn exited(&self) -> bool {
        self.exit_time.is_some()
    }
}

fn standard_normals(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Factors shared by every rollout of one design.
struct Sampler<'a> {
    system: &'a dyn ItoSystem,
    safe_set: &'a SafeSet,
    design: &'a LqgDesign,
    initial_mean: &'a DVector<f64>,
    init_factor: DMatrix<f64>,
    obs_factor: DMatrix<f64>,
    predictions: Vec<DMatrix<f64>>,
    substeps: usize,
    seed: u64,
}

impl<'a> Sampler<'a> {
    fn new(
        system: &'a dyn ItoSystem,
        safe_set: &'a SafeSet,
        design: &'a LqgDesign,
        initial_mean: &'a DVector<f64>,
        config: &McConfig,
    ) -> Result<Self> {
        config.validate()?;
        let n = system.state_dim();
        if design.state_dim() != n || initial_mean.len() != n {
            return Err(Error::DimensionMismatch { context: "rollout state", expected: n, got: initial_mean.len() });
        }
        let predictions = (0..design.nominal.num_ticks()).map(|k| design.estimator_prediction(k)).collect();
        Ok(Self {
            system,
            safe_set,
            design,
            initial_mean,
            init_factor: linalg::psd_factor(&design.initial_cov)?,
            obs_factor: linalg::psd_factor(&design.observation_cov)?,
            predictions,
            substeps: config.substeps,
            seed: config.seed,
        })
    }

    fn run(&self, index: usize) -> Result<RolloutOutcome> {
        let n = self.system.state_dim();
        let w = self.system.noise_dim();
        let nominal = &self.design.nominal;
        let mut rng = rollout_rng(self.seed, index as u64);

        let mut x = self.initial_mean + &self.init_factor * standard_normals(&mut rng, n);
        if let Some(j) = self.safe_set.first_violated(&x) {
            return Ok(RolloutOutcome { exit_time: Some(0.0), exit_constraint: Some(j), final_state: x });
        }
        let mut est_prior = self.initial_mean.clone();
        let h = nominal.tick / self.substeps as f64;
        let sqrt_h = h.sqrt();

        for k in 0..nominal.num_ticks() {
            let t_k = nominal.tick_time(k);
            let y = &x + &self.obs_factor * standard_normals(&mut rng, n);
            let est = &est_prior + &self.design.kalman_gains[k] * (y - &est_prior);
            let est_dev = &est - &nominal.states[k];
            let u = &nominal.controls[k] - &self.design.lqr_gains[k] * &est_dev;

            for s in 0..self.substeps {
                let t = t_k + s as f64 * h;
                let f = self.system.drift(t, &x, &u);
                let g = self.system.diffusion(t, &x, &u);
                x += f * h + g * (standard_normals(&mut rng, w) * sqrt_h);
                let t_next = if s + 1 == self.substeps { nominal.tick_time(k + 1) } else { t + h };
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::SimulationBlowup { rollout: index, time: t_next });
                }
                if let Some(j) = self.safe_set.first_violated(&x) {
                    return Ok(RolloutOutcome { exit_time: Some(t_next), exit_constraint: Some(j), final_state: x });
                }
            }
            est_prior = &nominal.states[k + 1] + &self.predictions[k] * est_dev;
        }
        Ok(RolloutOutcome { exit_time: None, exit_constraint: None, final_state: x })
    }
}

/// One closed-loop rollout from `x₀ ~ N(initial_mean, design.initial_cov)` with
/// estimator prior `initial_mean`.
pub fn rollout(
    system: &dyn ItoSystem,
    safe_set: &SafeSet,
    design: &LqgDesign,
    initial_mean: &DVector<f64>,
    config: &McConfig,
    index: usize,
) -> Result<RolloutOutcome> {
    Sampler::new(system, safe_set, design, initial_mean, config)?.run(index)
}

#[derive(Clone, Debug, PartialEq)]
pub struct McResult {
    /// Exited rollouts over `num_rollouts`.
    pub estimate: f64,
    pub standard_error: f64,
    pub num_rollouts: usize,
    pub exits: usize,
    /// First exits per partition interval `(t_i, t_{i+1}]`; exits at 0 count in the first.
    pub first_exit_histogram: Vec<usize>,
    pub exit_constraint_counts: Vec<usize>,
    /// Empirical exit cumulant at each partition time.
    pub cumulative_curve: Vec<f64>,
}

pub fn binomial_standard_error(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Runs `config.num_rollouts` rollouts (concurrently, reduced in index order).
pub fn estimate_mc(
    system: &dyn ItoSystem,
    safe_set: &SafeSet,
    design: &LqgDesign,
    initial_mean: &DVector<f64>,
    partition: &TimePartition,
    config: &McConfig,
) -> Result<McResult> {
    partition.check_horizon(design.horizon())?;
    let sampler = Sampler::new(system, safe_set, design, initial_mean, config)?;
    let outcomes: Vec<Result<Option<(f64, usize)>>> = (0..config.num_rollouts)
        .into_par_iter()
        .map(|i| sampler.run(i).map(|o| o.exit_time.zip(o.exit_constraint)))
        .collect();

    let failures = outcomes.iter().filter(|o| o.is_err()).count();
    let mut exits_at = Vec::new();
    let mut exit_constraint_counts = vec![0; safe_set.len()];
    for outcome in outcomes {
        match outcome {
            Ok(Some((t, j))) => {
                exits_at.push(t);
                exit_constraint_counts[j] += 1;
            }
            Ok(None) => {}
            Err(Error::SimulationBlowup { rollout, time }) if failures > 1 => {
                return Err(Error::invalid(format!(
                    "{failures} rollouts blew up; first was rollout {rollout} at t = {time}"
                )));
            }
            Err(e) => return Err(e),
        }
    }

    let times = partition.times();
    let k = partition.num_intervals();
    let mut histogram = vec![0; k];
    for &t in &exits_at {
        // Interval i covers (t_i, t_{i+1}].
        let i = times[1..].partition_point(|&edge| edge < t).min(k - 1);
        histogram[i] += 1;
    }
    let n = config.num_rollouts;
    let exits = exits_at.len();
    let mut cumulative_curve = Vec::with_capacity(k + 1);
    cumulative_curve.push(exits_at.iter().filter(|&&t| t <= 0.0).count() as f64 / n as f64);
    let mut running = 0;
    for &count in &histogram {
        running += count;
        cumulative_curve.push(running as f64 / n as f64);
    }
    let estimate = exits as f64 / n as f64;
    Ok(McResult {
        estimate,
        standard_error: binomial_standard_error(estimate, n),
        num_rollouts: n,
        exits,
        first_exit_histogram: histogram,
        exit_constraint_counts,
        cumulative_curve,
    })
}

/// Whether crossings between discrete monitoring points are sampled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BridgeCorrection {
    Off,
    /// Each substep also exits with the Brownian-bridge crossing probability
    /// `exp(-2 y_a y_b / (σ² δ))`; exact for constant coefficients.
    On,
}

/// Exit frequency of `y(s) = z + h s + σ W(s)` through `0` within `dt`,
/// simulated with `substeps` equal steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FirstPassageEstimate {
    pub estimate: f64,
    pub standard_error: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn first_passage_frequency(
    z: f64,
    h: f64,
    sigma: f64,
    dt: f64,
    paths: usize,
    substeps: usize,
    bridge: BridgeCorrection,
    seed: u64,
) -> Result<FirstPassageEstimate> {
    if paths == 0 || substeps == 0 || !(dt > 0.0) || sigma < 0.0 || ![z, h, sigma, dt].iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("first_passage_frequency: invalid arguments"));
    }
    let delta = dt / substeps as f64;
    let step_sd = sigma * delta.sqrt();
    let bridge_scale = if sigma > 0.0 { -2.0 / (sigma * sigma * delta) } else { f64::NEG_INFINITY };
    let exits: usize = (0..paths)
        .into_par_iter()
        .map(|i| {
            if z >= 0.0 {
                return 1;
            }
            let mut rng = rollout_rng(seed, i as u64);
            let mut y = z;
            for _ in 0..substeps {
                let next = y + h * delta + step_sd * rng.sample::<f64, _>(StandardNormal);
                if next >= 0.0 {
                    return 1;
                }
                if bridge == BridgeCorrection::On && sigma > 0.0 {
                    let p = (bridge_scale * y * next).exp();
                    if p > 1e-17 && rng.random::<f64>() < p {
                        return 1;
                    }
                }
                y = next;
            }
            0
        })
        .sum();
    let estimate = exits as f64 / paths as f64;
    Ok(FirstPassageEstimate { estimate, standard_error: binomial_standard_error(estimate, paths) })
}
