//! Controlled Itô systems `dx = f(t, x, u) dt + G(t, x, u) dw`.

use std::fmt::Debug;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Position/velocity index pairs for systems of the form `dp = v dt + G_p dw`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Workspace {
    pub position: Vec<usize>,
    pub velocity: Vec<usize>,
}

impl Workspace {
    pub fn dim(&self) -> usize {
        self.position.len()
    }
}

/// A continuous-time stochastic plant with full-state noisy observations.
pub trait ItoSystem: Debug + Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;

    fn drift(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    /// `n_x × noise_dim` diffusion matrix.
    fn diffusion(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;

    /// Covariance of the additive observation noise `y_k = x(t_k) + ν`.
    fn observation_noise_cov(&self) -> &DMatrix<f64>;

    fn control_rate_hz(&self) -> f64;

    /// Kinematic structure, if the state contains a position block driven by a
    /// velocity block.
    fn workspace(&self) -> Option<&Workspace> {
        None
    }

    /// `(∂f/∂x, ∂f/∂u)`; central differences unless overridden.
    fn drift_jacobians(
        &self,
        t: f64,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.state_dim();
        let m = self.control_dim();
        let mut jx = DMatrix::zeros(n, n);
        let mut ju = DMatrix::zeros(n, m);
        for i in 0..n {
            let h = 1e-6 * x[i].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let col = (self.drift(t, &xp, u) - self.drift(t, &xm, u)) / (2.0 * h);
            jx.set_column(i, &col);
        }
        for i in 0..m {
            let h = 1e-6 * u[i].abs().max(1.0);
            let mut up = u.clone();
            let mut um = u.clone();
            up[i] += h;
            um[i] -= h;
            let col = (self.drift(t, x, &up) - self.drift(t, x, &um)) / (2.0 * h);
            ju.set_column(i, &col);
        }
        (jx, ju)
    }
}

/// Planar second-order Dubins car, state `(p, v, θ, ω)` and control `(c, α)`.
#[derive(Clone, Debug)]
pub struct DubinsCar {
    noise_scale: f64,
    diffusion: DMatrix<f64>,
    observation_cov: DMatrix<f64>,
    control_rate_hz: f64,
    workspace: Workspace,
}

pub fn dubins_system(noise_scale: f64, obs_noise_var: f64, control_rate_hz: f64) -> Result<DubinsCar> {
    if !(noise_scale > 0.0) || !noise_scale.is_finite() {
        return Err(Error::invalid(format!("noise_scale must be positive, got {noise_scale}")));
    }
    if !(obs_noise_var >= 0.0) || !obs_noise_var.is_finite() {
        return Err(Error::invalid(format!("obs_noise_var must be non-negative, got {obs_noise_var}")));
    }
    check_rate(control_rate_hz)?;
    let mut g = DMatrix::zeros(6, 4);
    g[(2, 0)] = 1.0;
    g[(3, 1)] = 1.0;
    g[(4, 2)] = 0.1;
    g[(5, 3)] = 1.0;
    g *= noise_scale;
    Ok(DubinsCar {
        noise_scale,
        diffusion: g,
        observation_cov: DMatrix::identity(6, 6) * obs_noise_var,
        control_rate_hz,
        workspace: Workspace {
            position: vec![0, 1],
            velocity: vec![2, 3],
        },
    })
}

impl DubinsCar {
    pub fn noise_scale(&self) -> f64 {
        self.noise_scale
    }
}

impl ItoSystem for DubinsCar {
    fn state_dim(&self) -> usize {
        6
    }
    fn control_dim(&self) -> usize {
        2
    }
    fn noise_dim(&self) -> usize {
        4
    }

    fn drift(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let (s, c) = x[4].sin_cos();
        DVector::from_vec(vec![x[2], x[3], u[0] * c, u[0] * s, x[5], u[1]])
    }

    fn diffusion(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.diffusion.clone()
    }

    fn observation_noise_cov(&self) -> &DMatrix<f64> {
        &self.observation_cov
    }

    fn control_rate_hz(&self) -> f64 {
        self.control_rate_hz
    }

    fn workspace(&self) -> Option<&Workspace> {
        Some(&self.workspace)
    }

    fn drift_jacobians(
        &self,
        _t: f64,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let (s, c) = x[4].sin_cos();
        let mut jx = DMatrix::zeros(6, 6);
        jx[(0, 2)] = 1.0;
        jx[(1, 3)] = 1.0;
        jx[(2, 4)] = -u[0] * s;
        jx[(3, 4)] = u[0] * c;
        jx[(4, 5)] = 1.0;
        let mut ju = DMatrix::zeros(6, 2);
        ju[(2, 0)] = c;
        ju[(3, 0)] = s;
        ju[(5, 1)] = 1.0;
        (jx, ju)
    }
}

/// Linear time-invariant plant `dx = (A x + B u) dt + G dw`.
#[derive(Clone, Debug)]
pub struct LinearSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    g: DMatrix<f64>,
    observation_cov: DMatrix<f64>,
    control_rate_hz: f64,
    workspace: Option<Workspace>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, g: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() {
            return Err(Error::invalid("A must be square"));
        }
        if b.nrows() != n {
            return Err(Error::DimensionMismatch { context: "B rows", expected: n, got: b.nrows() });
        }
        if g.nrows() != n {
            return Err(Error::DimensionMismatch { context: "G rows", expected: n, got: g.nrows() });
        }
        Ok(Self {
            a,
            b,
            g,
            observation_cov: DMatrix::identity(n, n) * 1e-4,
            control_rate_hz: 60.0,
            workspace: None,
        })
    }

    pub fn with_observation_cov(mut self, cov: DMatrix<f64>) -> Result<Self> {
        let n = self.a.nrows();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::DimensionMismatch { context: "observation covariance", expected: n, got: cov.nrows() });
        }
        crate::linalg::check_psd(&cov)?;
        if !crate::linalg::is_symmetric(&cov, 1e-12) {
            return Err(Error::invalid("observation covariance must be symmetric"));
        }
        self.observation_cov = cov;
        Ok(self)
    }

    pub fn with_control_rate(mut self, hz: f64) -> Result<Self> {
        check_rate(hz)?;
        self.control_rate_hz = hz;
        Ok(self)
    }

    pub fn with_workspace(mut self, workspace: Workspace) -> Result<Self> {
        let n = self.a.nrows();
        if workspace.position.len() != workspace.velocity.len()
            || workspace.position.iter().chain(&workspace.velocity).any(|&i| i >= n)
        {
            return Err(Error::invalid("workspace indices out of range or unpaired"));
        }
        self.workspace = Some(workspace);
        Ok(self)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }
}

/// 1-D double integrator `(p, v)` with acceleration control and noise on `v` only.
pub fn double_integrator_1d(noise: f64) -> Result<LinearSystem> {
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::invalid(format!("noise must be finite and >= 0, got {noise}")));
    }
    LinearSystem::new(
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        DMatrix::from_row_slice(2, 1, &[0.0, noise]),
    )?
    .with_workspace(Workspace { position: vec![0], velocity: vec![1] })
}

impl ItoSystem for LinearSystem {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn noise_dim(&self) -> usize {
        self.g.ncols()
    }

    fn drift(&self, _t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    fn diffusion(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.g.clone()
    }

    fn observation_noise_cov(&self) -> &DMatrix<f64> {
        &self.observation_cov
    }

    fn control_rate_hz(&self) -> f64 {
        self.control_rate_hz
    }

    fn workspace(&self) -> Option<&Workspace> {
        self.workspace.as_ref()
    }

    fn drift_jacobians(
        &self,
        _t: f64,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.a.clone(), self.b.clone())
    }
}

fn check_rate(hz: f64) -> Result<()> {
    if !(hz > 0.0) || !hz.is_finite() {
        return Err(Error::invalid(format!("control rate must be positive, got {hz}")));
    }
    Ok(())
}

/// Noiseless RK4 integration with `u` held constant over `duration`.
pub fn integrate_deterministic(
    system: &dyn ItoSystem,
    t0: f64,
    x0: &DVector<f64>,
    u: &DVector<f64>,
    duration: f64,
    steps: usize,
) -> DVector<f64> {
    let steps = steps.max(1);
    let h = duration / steps as f64;
    let mut x = x0.clone();
    let mut t = t0;
    for _ in 0..steps {
        let k1 = system.drift(t, &x, u);
        let k2 = system.drift(t + 0.5 * h, &(&x + &k1 * (0.5 * h)), u);
        let k3 = system.drift(t + 0.5 * h, &(&x + &k2 * (0.5 * h)), u);
        let k4 = system.drift(t + h, &(&x + &k3 * h), u);
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        t += h;
    }
    x
}
