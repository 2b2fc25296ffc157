use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, discretize, symmetrize};
use crate::sde_models::{integrate_deterministic, ItoSystem};

use super::GaussianBelief;

/// Snap tolerance when mapping times onto the control grid, in ticks.
const GRID_TOL: f64 = 1e-9;
/// Riccati iterates above this norm are treated as divergence.
const RICCATI_NORM_LIMIT: f64 = 1e12;

/// Nominal states on the control grid (`N + 1` entries) and the zero-order-hold
/// controls applied over each tick (`N` entries).
#[derive(Clone, Debug, PartialEq)]
pub struct NominalTrajectory {
    pub tick: f64,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

impl NominalTrajectory {
    pub fn new(tick: f64, states: Vec<DVector<f64>>, controls: Vec<DVector<f64>>) -> Result<Self> {
        if !(tick > 0.0) {
            return Err(Error::invalid("tick must be positive"));
        }
        if controls.is_empty() || states.len() != controls.len() + 1 {
            return Err(Error::invalid(format!(
                "nominal needs N+1 states for N controls (got {} states, {} controls)",
                states.len(),
                controls.len()
            )));
        }
        Ok(Self { tick, states, controls })
    }

    /// Open-loop noiseless rollout of `controls` from `x0`.
    pub fn from_controls(system: &dyn ItoSystem, x0: DVector<f64>, controls: Vec<DVector<f64>>) -> Result<Self> {
        let tick = 1.0 / system.control_rate_hz();
        let mut states = Vec::with_capacity(controls.len() + 1);
        states.push(x0);
        for (k, u) in controls.iter().enumerate() {
            let next = integrate_deterministic(system, k as f64 * tick, &states[k], u, tick, 10);
            states.push(next);
        }
        Self::new(tick, states, controls)
    }

    pub fn num_ticks(&self) -> usize {
        self.controls.len()
    }

    pub fn horizon(&self) -> f64 {
        self.tick * self.num_ticks() as f64
    }

    pub fn tick_time(&self, k: usize) -> f64 {
        k as f64 * self.tick
    }

    /// Tick index `k` with `t ∈ [t_k, t_{k+1})` (clamped to the last tick) and
    /// whether `t` sits on the grid.
    pub fn locate(&self, t: f64) -> (usize, bool) {
        let r = t / self.tick;
        let nearest = r.round();
        if (r - nearest).abs() < GRID_TOL {
            let k = nearest.max(0.0) as usize;
            (k.min(self.num_ticks() - 1), true)
        } else {
            ((r.floor().max(0.0) as usize).min(self.num_ticks() - 1), false)
        }
    }

    /// Grid index if `t` is a grid time.
    pub fn grid_index(&self, t: f64) -> Option<usize> {
        let r = t / self.tick;
        let nearest = r.round();
        ((r - nearest).abs() < GRID_TOL && nearest >= 0.0 && nearest as usize <= self.num_ticks())
            .then_some(nearest as usize)
    }

    /// Control held at time `t`.
    pub fn control_at(&self, t: f64) -> &DVector<f64> {
        let (k, _) = self.locate(t);
        &self.controls[k.min(self.num_ticks() - 1)]
    }

    /// Nominal state at an arbitrary time (noiseless flow inside a tick).
    pub fn state_at(&self, system: &dyn ItoSystem, t: f64) -> DVector<f64> {
        if let Some(k) = self.grid_index(t) {
            return self.states[k].clone();
        }
        let (k, _) = self.locate(t);
        let s = t - self.tick_time(k);
        let steps = ((10.0 * s / self.tick).ceil() as usize).max(1);
        integrate_deterministic(system, self.tick_time(k), &self.states[k], &self.controls[k], s, steps)
    }
}

/// Diagonal LQR weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LqgWeights {
    pub state: DVector<f64>,
    pub control: DVector<f64>,
}

impl LqgWeights {
    pub fn new(state: Vec<f64>, control: Vec<f64>) -> Self {
        Self { state: DVector::from_vec(state), control: DVector::from_vec(control) }
    }
}

/// Linearized, discretized model over one control tick.
#[derive(Clone, Debug, PartialEq)]
pub struct TickModel {
    /// Continuous-time `∂f/∂x` at the tick start.
    pub state_jacobian: DMatrix<f64>,
    /// Continuous-time `∂f/∂u` at the tick start.
    pub control_jacobian: DMatrix<f64>,
    pub diffusion: DMatrix<f64>,
    /// `exp(F Δ)`.
    pub transition: DMatrix<f64>,
    pub input: DMatrix<f64>,
    pub process_cov: DMatrix<f64>,
}

impl TickModel {
    fn build(system: &dyn ItoSystem, t: f64, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> Self {
        let (f, b) = system.drift_jacobians(t, x, u);
        let g = system.diffusion(t, x, u);
        let (phi, gamma, q) = discretize(&f, &b, &g, dt);
        Self {
            state_jacobian: f,
            control_jacobian: b,
            diffusion: g,
            transition: phi,
            input: gamma,
            process_cov: q,
        }
    }

    /// Discretization over a partial tick of length `s`.
    pub fn partial(&self, s: f64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        discretize(&self.state_jacobian, &self.control_jacobian, &self.diffusion, s)
    }
}

/// Output-feedback LQG tracker about a nominal trajectory.
///
/// Control law at tick `k`: `u = u_nom[k] - lqr_gains[k] (x̂_k - x_nom[k])`,
/// where `x̂_k` is the Kalman estimate after the observation at `t_k`.
#[derive(Clone, Debug)]
pub struct LqgDesign {
    pub nominal: NominalTrajectory,
    pub linearization: Vec<TickModel>,
    pub lqr_gains: Vec<DMatrix<f64>>,
    /// Filter gains for ticks `0..=N` (one per observation).
    pub kalman_gains: Vec<DMatrix<f64>>,
    pub observation_cov: DMatrix<f64>,
    pub initial_cov: DMatrix<f64>,
}

pub fn design_lqg(
    system: &dyn ItoSystem,
    nominal: &NominalTrajectory,
    weights: &LqgWeights,
    initial_cov: &DMatrix<f64>,
    horizon: f64,
) -> Result<LqgDesign> {
    let n = system.state_dim();
    let m = system.control_dim();
    let tick = 1.0 / system.control_rate_hz();
    if (nominal.tick - tick).abs() > 1e-12 * tick.max(1.0) {
        return Err(Error::invalid(format!(
            "nominal tick {} does not match control rate {} Hz",
            nominal.tick,
            system.control_rate_hz()
        )));
    }
    if (nominal.horizon() - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(Error::invalid(format!(
            "nominal covers {} s but the horizon is {} s",
            nominal.horizon(),
            horizon
        )));
    }
    if weights.state.len() != n || weights.control.len() != m {
        return Err(Error::invalid("LQR weight dimensions do not match the system"));
    }
    if weights.control.iter().any(|r| !(*r > 0.0)) || weights.state.iter().any(|q| !(*q >= 0.0)) {
        return Err(Error::invalid("LQR weights must be Q >= 0 and R > 0"));
    }
    if initial_cov.shape() != (n, n) {
        return Err(Error::DimensionMismatch { context: "initial covariance", expected: n, got: initial_cov.nrows() });
    }
    linalg::check_psd(initial_cov)?;

    let big_n = nominal.num_ticks();
    let linearization: Vec<TickModel> = (0..big_n)
        .map(|k| TickModel::build(system, nominal.tick_time(k), &nominal.states[k], &nominal.controls[k], tick))
        .collect();

    // Finite-horizon LQR, terminal cost = stage cost.
    let q = DMatrix::from_diagonal(&weights.state);
    let r = DMatrix::from_diagonal(&weights.control);
    let mut p = q.clone();
    let mut lqr_gains = vec![DMatrix::zeros(m, n); big_n];
    for k in (0..big_n).rev() {
        let a = &linearization[k].transition;
        let b = &linearization[k].input;
        let s = b.transpose() * &p * b + &r;
        let rhs = b.transpose() * &p * a;
        let gain = s
            .clone()
            .cholesky()
            .map(|c| c.solve(&rhs))
            .or_else(|| s.clone().lu().solve(&rhs))
            .ok_or(Error::RiccatiDivergence { tick: k, norm: f64::INFINITY })?;
        p = &q + a.transpose() * &p * (a - b * &gain);
        symmetrize(&mut p);
        let norm = p.norm();
        if !norm.is_finite() || norm > RICCATI_NORM_LIMIT {
            return Err(Error::RiccatiDivergence { tick: k, norm });
        }
        lqr_gains[k] = gain;
    }

    // Time-varying Kalman filter for y_k = x_k + ν.
    let obs = system.observation_noise_cov().clone();
    let eye = DMatrix::identity(n, n);
    let mut prior = initial_cov.clone();
    let mut kalman_gains = Vec::with_capacity(big_n + 1);
    for k in 0..=big_n {
        let innovation = &prior + &obs;
        let gain = &prior * linalg::pinv_symmetric(&innovation);
        let i_l = &eye - &gain;
        let mut post = &i_l * &prior * i_l.transpose() + &gain * &obs * gain.transpose();
        symmetrize(&mut post);
        kalman_gains.push(gain);
        if k < big_n {
            let lin = &linearization[k];
            prior = &lin.transition * &post * lin.transition.transpose() + &lin.process_cov;
            symmetrize(&mut prior);
            let norm = prior.norm();
            if !norm.is_finite() || norm > RICCATI_NORM_LIMIT {
                return Err(Error::RiccatiDivergence { tick: k, norm });
            }
        }
    }

    Ok(LqgDesign {
        nominal: nominal.clone(),
        linearization,
        lqr_gains,
        kalman_gains,
        observation_cov: obs,
        initial_cov: initial_cov.clone(),
    })
}

impl LqgDesign {
    pub fn state_dim(&self) -> usize {
        self.initial_cov.nrows()
    }

    pub fn horizon(&self) -> f64 {
        self.nominal.horizon()
    }

    /// Closed-loop deviation transition over a full tick:
    /// `ê⁻_{k+1} = (A_k - B_k K_k) ê_k`.
    pub fn estimator_prediction(&self, k: usize) -> DMatrix<f64> {
        let lin = &self.linearization[k];
        &lin.transition - &lin.input * &self.lqr_gains[k]
    }

    /// Augmented belief at `t = 0` after the first observation, for
    /// `x_0 ~ N(mean, initial_cov)` and estimator prior `x̂⁻_0 = mean`.
    pub fn initial_belief(&self, mean: &DVector<f64>) -> Result<GaussianBelief> {
        let n = self.state_dim();
        if mean.len() != n {
            return Err(Error::DimensionMismatch { context: "initial mean", expected: n, got: mean.len() });
        }
        let l = &self.kalman_gains[0];
        let s0 = &self.initial_cov;
        let mut cov = DMatrix::zeros(2 * n, 2 * n);
        cov.view_mut((0, 0), (n, n)).copy_from(s0);
        let cross = s0 * l.transpose();
        cov.view_mut((0, n), (n, n)).copy_from(&cross);
        cov.view_mut((n, 0), (n, n)).copy_from(&cross.transpose());
        let est = l * (s0 + &self.observation_cov) * l.transpose();
        cov.view_mut((n, n), (n, n)).copy_from(&est);
        symmetrize(&mut cov);
        let mut m = DVector::zeros(2 * n);
        m.rows_mut(0, n).copy_from(mean);
        m.rows_mut(n, n).copy_from(mean);
        GaussianBelief::augmented(m, cov, 0.0, n)
    }
}
