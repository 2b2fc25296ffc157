//! Interval exit probabilities for the frozen-coefficient constraint process:
//! the closed-form first-passage kernel, Gaussian quadratures over a belief
//! and the union bound across constraints.

mod psi;
mod quadrature;

pub use psi::{local_coefficients, psi, LocalCoefficients};
pub use quadrature::{QuadratureSpec, Reduction, MAX_GRID_NODES};

use nalgebra::{DMatrix, DVector};

use crate::belief::GaussianBelief;
use crate::error::{Error, Result};
use crate::normal;
use crate::sde_models::{Constraint, ItoSystem, SafeSet, Shape};
use psi::psi_unchecked;
use quadrature::{for_each_node, graded_panels, integrate_adaptive, GaussianAxes, NormalRule};

/// Projected variances below this are treated as deterministic.
const DETERMINISTIC_VAR: f64 = 1e-300;

/// Measure the kernel is integrated against.
#[derive(Clone, Copy, Debug)]
pub enum ExitMeasure<'a> {
    Gaussian(&'a GaussianBelief),
    /// Gaussian restricted to the safe set.
    SafeWeighted { belief: &'a GaussianBelief, safe_set: &'a SafeSet },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitMode {
    Plain,
    SafeWeighted,
}

/// Union-bound exit probability over one interval.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitProbability {
    /// One entry per constraint, unclamped.
    pub per_constraint: Vec<f64>,
    /// `min(1, Σ per_constraint)`.
    pub total: f64,
}

impl ExitProbability {
    fn from_parts(per_constraint: Vec<f64>) -> Self {
        let sum: f64 = per_constraint.iter().sum();
        Self { per_constraint, total: sum.clamp(0.0, 1.0) }
    }

    pub fn sum(&self) -> f64 {
        self.per_constraint.iter().sum()
    }
}

/// Integral of the exit kernel for one constraint over `[t_start, t_end]`.
///
/// Drift and diffusion are frozen at `t_start` under `control`.
pub fn interval_exit_prob_constraint(
    system: &dyn ItoSystem,
    constraint: &Constraint,
    measure: ExitMeasure<'_>,
    control: &DVector<f64>,
    t_start: f64,
    t_end: f64,
    spec: &QuadratureSpec,
) -> Result<f64> {
    let (belief, indicator) = match measure {
        ExitMeasure::Gaussian(b) => (b, None),
        ExitMeasure::SafeWeighted { belief, safe_set } => (belief, Some(safe_set)),
    };
    let job = Job::new(system, vec![constraint], belief, indicator, control, t_start, t_end, spec)?;
    Ok(job.run()?[0])
}

/// Union bound of [`interval_exit_prob_constraint`] over every constraint.
#[allow(clippy::too_many_arguments)]
pub fn interval_exit_prob(
    system: &dyn ItoSystem,
    safe_set: &SafeSet,
    belief: &GaussianBelief,
    control: &DVector<f64>,
    t_start: f64,
    t_end: f64,
    spec: &QuadratureSpec,
    mode: ExitMode,
) -> Result<ExitProbability> {
    if safe_set.is_empty() {
        return Ok(ExitProbability::from_parts(Vec::new()));
    }
    let indicator = (mode == ExitMode::SafeWeighted).then_some(safe_set);
    let constraints = safe_set.constraints.iter().collect();
    let job = Job::new(system, constraints, belief, indicator, control, t_start, t_end, spec)?;
    Ok(ExitProbability::from_parts(job.run()?))
}

/// `P(g(x) > 0)` under the state marginal of `belief`.
///
/// Half-planes are closed form. Circles are integrated on a grid over all but
/// the widest principal axis, with the chord along that axis in closed form.
pub fn violation_probability(constraint: &Constraint, belief: &GaussianBelief, spec: &QuadratureSpec) -> Result<f64> {
    spec.validate()?;
    let support = constraint.support();
    let n = belief.state_dim();
    if let Some(&bad) = support.iter().find(|&&i| i >= n) {
        return Err(Error::DimensionMismatch { context: "constraint support", expected: n, got: bad + 1 });
    }
    let mean = DVector::from_iterator(support.len(), support.iter().map(|&i| belief.mean[i]));
    let cov = select(&belief.cov, support, support);

    let p = match constraint.shape() {
        Shape::HalfPlane { normal, offset } => {
            let a = DVector::from_column_slice(normal);
            let m = a.dot(&mean) - offset;
            let var = a.dot(&(&cov * &a));
            if var <= DETERMINISTIC_VAR {
                indicator(m > 0.0)
            } else {
                normal::cdf(m / var.sqrt())
            }
        }
        Shape::Circle { center, radius } => {
            let axes = GaussianAxes::new(mean.clone(), &cov)?;
            let k = axes.rank();
            if k == 0 {
                return Ok(indicator(constraint.value_ws(mean.as_slice()) > 0.0));
            }
            let c = DVector::from_column_slice(center);
            let u = axes.directions.column(0) * axes.scales[0];
            let uu = u.norm_squared();
            let rest = GaussianAxes {
                mean: &mean - &c,
                directions: axes.directions.columns(1, k - 1).into_owned(),
                scales: axes.scales[1..].to_vec(),
            };
            let rule = NormalRule::new(spec.points_for(k - 1), spec.box_halfwidth_sigmas);
            let mut q = DVector::zeros(mean.len());
            let mut acc = 0.0;
            for_each_node(k - 1, &rule, |xi, w| {
                rest.point(xi, &mut q);
                let b = q.dot(&u);
                let disc = b * b - uu * (q.norm_squared() - radius * radius);
                if disc > 0.0 {
                    let root = disc.sqrt();
                    acc += w * normal_interval((-b - root) / uu, (-b + root) / uu);
                }
                Ok(())
            })?;
            acc
        }
    };
    Ok(p.clamp(0.0, 1.0))
}

/// `P(lo < ξ < hi)` for a standard normal, accurate in both tails.
fn normal_interval(lo: f64, hi: f64) -> f64 {
    if lo >= 0.0 {
        normal::sf(lo) - normal::sf(hi)
    } else {
        normal::cdf(hi) - normal::cdf(lo)
    }
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Householder reflection whose first column is `g / ‖g‖`; identity when `g = 0`.
fn reflect_onto_first_axis(g: &DVector<f64>) -> DMatrix<f64> {
    let k = g.len();
    let mut h = DMatrix::<f64>::identity(k, k);
    let norm = g.norm();
    if norm > 0.0 {
        let mut u = g / norm;
        u[0] -= 1.0;
        let uu = u.norm_squared();
        if uu > 1e-24 {
            h -= (&u * u.transpose()) * (2.0 / uu);
        }
    }
    h
}

/// Parameters `t` at which `x0 + t e` crosses the boundary of `c`.
fn line_crossings(c: &Constraint, x0: &DVector<f64>, e: &DVector<f64>) -> Vec<f64> {
    let support = c.support();
    match c.shape() {
        Shape::HalfPlane { normal, offset } => {
            let slope: f64 = normal.iter().zip(support).map(|(a, &i)| a * e[i]).sum();
            let value: f64 = normal.iter().zip(support).map(|(a, &i)| a * x0[i]).sum::<f64>() - offset;
            if slope == 0.0 {
                Vec::new()
            } else {
                vec![-value / slope]
            }
        }
        Shape::Circle { center, radius } => {
            let (mut a, mut b, mut q) = (0.0, 0.0, -radius * radius);
            for (ci, &i) in center.iter().zip(support) {
                let d = x0[i] - ci;
                a += e[i] * e[i];
                b += d * e[i];
                q += d * d;
            }
            let disc = b * b - a * q;
            if a == 0.0 || disc <= 0.0 {
                Vec::new()
            } else {
                let root = disc.sqrt();
                vec![(-b - root) / a, (-b + root) / a]
            }
        }
    }
}

fn select(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

fn gather(p: &[f64], map: &[usize], buf: &mut Vec<f64>) {
    buf.clear();
    buf.extend(map.iter().map(|&i| p[i]));
}

struct Job<'a> {
    system: &'a dyn ItoSystem,
    constraints: Vec<&'a Constraint>,
    belief: &'a GaussianBelief,
    indicator: Option<&'a SafeSet>,
    control: &'a DVector<f64>,
    t: f64,
    dt: f64,
    spec: &'a QuadratureSpec,
}

/// Workspace coordinates and, per constraint, the positions of its support
/// inside the workspace position block.
struct Layout {
    pos: Vec<usize>,
    vel: Vec<usize>,
    maps: Vec<Vec<usize>>,
    indicator_maps: Vec<Vec<usize>>,
}

impl<'a> Job<'a> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        system: &'a dyn ItoSystem,
        constraints: Vec<&'a Constraint>,
        belief: &'a GaussianBelief,
        indicator: Option<&'a SafeSet>,
        control: &'a DVector<f64>,
        t_start: f64,
        t_end: f64,
        spec: &'a QuadratureSpec,
    ) -> Result<Self> {
        spec.validate()?;
        if !(t_end > t_start) || !t_start.is_finite() || !t_end.is_finite() {
            return Err(Error::invalid(format!("interval [{t_start}, {t_end}] is empty or non-finite")));
        }
        if belief.state_dim() != system.state_dim() {
            return Err(Error::DimensionMismatch {
                context: "belief state",
                expected: system.state_dim(),
                got: belief.state_dim(),
            });
        }
        if control.len() != system.control_dim() {
            return Err(Error::DimensionMismatch {
                context: "control",
                expected: system.control_dim(),
                got: control.len(),
            });
        }
        Ok(Self { system, constraints, belief, indicator, control, t: t_start, dt: t_end - t_start, spec })
    }

    fn run(&self) -> Result<Vec<f64>> {
        match self.spec.reduction {
            Reduction::Full => self.full(),
            Reduction::PositionOnly | Reduction::PositionPlusScalarDrift => self.reduced(),
        }
    }

    /// Grid over all state axes but one; the remaining axis follows the
    /// whitened constraint gradient at the mean and is integrated adaptively
    /// between the boundary crossings along each line.
    fn full(&self) -> Result<Vec<f64>> {
        let mean = self.belief.state_mean();
        let axes = GaussianAxes::new(mean.clone(), &self.belief.state_cov())?;
        let k = axes.rank();
        if k == 0 {
            return self.constraints.iter().map(|c| self.full_kernel(c, &mean)).collect();
        }
        let n = mean.len();
        let scaled = &axes.directions * DMatrix::from_diagonal(&DVector::from_column_slice(&axes.scales));
        let rule = NormalRule::new(self.spec.points_for(k), self.spec.box_halfwidth_sigmas);
        let reach = self.spec.box_halfwidth_sigmas + 3.0;
        let tol = 1e-9;
        let mut boundaries: Vec<&Constraint> = self.indicator.map(|s| s.constraints.iter().collect()).unwrap_or_default();
        boundaries.extend(&self.constraints);

        let mut out = Vec::with_capacity(self.constraints.len());
        for c in &self.constraints {
            let grad = c.gradient(&mean).unwrap_or_else(|_| DVector::zeros(n));
            let cols = &scaled * reflect_onto_first_axis(&scaled.tr_mul(&grad));
            let e = cols.column(0).into_owned();
            let mut x0 = DVector::zeros(n);
            let mut x = DVector::zeros(n);
            let mut failure = None;
            let mut acc = 0.0;
            for_each_node(k - 1, &rule, |xi, w| {
                x0.copy_from(&mean);
                for (j, &v) in xi.iter().enumerate() {
                    x0.axpy(v, &cols.column(j + 1), 1.0);
                }
                let mut breaks = vec![-reach, reach];
                for b in &boundaries {
                    breaks.extend(line_crossings(b, &x0, &e).into_iter().filter(|t| t.abs() < reach));
                }
                breaks.sort_by(f64::total_cmp);
                breaks.dedup();
                let mut integrand = |t: f64| -> f64 {
                    x.copy_from(&x0);
                    x.axpy(t, &e, 1.0);
                    match self.full_kernel(c, &x) {
                        Ok(p) => normal::pdf(t) * p,
                        Err(err) => {
                            failure.get_or_insert(err);
                            0.0
                        }
                    }
                };
                for pair in breaks.windows(2) {
                    acc += w * integrate_adaptive(&mut integrand, pair[0], pair[1], tol);
                }
                Ok(())
            })?;
            if let Some(err) = failure {
                return Err(err);
            }
            out.push(acc);
        }
        Ok(out)
    }

    /// Exit kernel at a state, zero outside the indicator set.
    fn full_kernel(&self, c: &Constraint, x: &DVector<f64>) -> Result<f64> {
        if let Some(set) = self.indicator {
            if !set.contains(x) {
                return Ok(0.0);
            }
        }
        if c.value(x) >= 0.0 {
            return Ok(1.0);
        }
        local_coefficients(self.system, c, self.t, x, self.control)?.exit_prob(self.dt)
    }

    fn layout(&self) -> Result<Layout> {
        let ws = self.system.workspace().ok_or_else(|| {
            Error::InvalidReduction("the system declares no workspace (position, velocity) split".into())
        })?;
        let map_of = |c: &Constraint| -> Result<Vec<usize>> {
            c.support()
                .iter()
                .map(|s| {
                    ws.position.iter().position(|p| p == s).ok_or_else(|| {
                        Error::InvalidReduction(format!("constraint depends on state {s}, which is not a workspace position"))
                    })
                })
                .collect()
        };
        let maps = self.constraints.iter().map(|c| map_of(c)).collect::<Result<Vec<_>>>()?;
        let indicator_maps = match self.indicator {
            Some(set) => set.constraints.iter().map(map_of).collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        Ok(Layout { pos: ws.position.clone(), vel: ws.velocity.clone(), maps, indicator_maps })
    }

    fn reduced(&self) -> Result<Vec<f64>> {
        let layout = self.layout()?;
        let (pos, vel) = (&layout.pos, &layout.vel);
        let d = pos.len();
        let mean = self.belief.state_mean();
        let cov = self.belief.state_cov();

        // Position drift must be the workspace velocity for the velocity-only drift term.
        let f = self.system.drift(self.t, &mean, self.control);
        for (&p, &v) in pos.iter().zip(vel) {
            if (f[p] - mean[v]).abs() > 1e-9 * (1.0 + mean[v].abs()) {
                return Err(Error::InvalidReduction(
                    "position drift differs from the workspace velocity; use the full reduction".into(),
                ));
            }
        }
        let g_mean = self.system.diffusion(self.t, &mean, self.control);
        let position_only = self.spec.reduction == Reduction::PositionOnly;
        if position_only && pos.iter().any(|&p| g_mean.row(p).amax() > 0.0) {
            return Err(Error::InvalidReduction(
                "position_only needs zero diffusion on the position rows".into(),
            ));
        }

        let mu_p = DVector::from_iterator(d, pos.iter().map(|&i| mean[i]));
        let mu_v = DVector::from_iterator(d, vel.iter().map(|&i| mean[i]));
        let s_pp = select(&cov, pos, pos);
        let s_vp = select(&cov, vel, pos);
        let s_vv = select(&cov, vel, vel);
        let axes = GaussianAxes::new(mu_p, &s_pp)?;
        let k = axes.rank();
        // v | ξ ~ N(μ_v + C ξ, Σ_vv − C Cᵀ).
        let mut c_mat = &s_vp * &axes.directions;
        for (j, s) in axes.scales.iter().enumerate() {
            c_mat.column_mut(j).scale_mut(1.0 / s);
        }
        let cond_cov = &s_vv - &c_mat * c_mat.transpose();

        let rule = NormalRule::new(self.spec.points_for(if position_only { k } else { k + 1 }), self.spec.box_halfwidth_sigmas);
        let mut acc = vec![0.0; self.constraints.len()];
        let mut on_grid = vec![true; self.constraints.len()];
        if position_only {
            for (j, (c, map)) in self.constraints.iter().zip(&layout.maps).enumerate() {
                let exact = match c.shape() {
                    Shape::HalfPlane { .. } => self.linear_layer(c, map, &layout, &axes, &mu_v, &c_mat, &cond_cov)?,
                    Shape::Circle { .. } => self.circle_lines(c, map, &layout, &axes, &mu_v, &c_mat, &cond_cov)?,
                };
                if let Some(prob) = exact {
                    acc[j] = prob;
                    on_grid[j] = false;
                }
            }
            if !on_grid.contains(&true) {
                return Ok(acc);
            }
        }
        let mut p = DVector::zeros(d);
        let mut v_mean = DVector::zeros(d);
        let mut x_node = mean.clone();
        let mut buf = Vec::with_capacity(d);
        let mut a_p = DVector::zeros(d);
        let dt = self.dt;

        for_each_node(k, &rule, |xi, w| {
            axes.point(xi, &mut p);
            v_mean.copy_from(&mu_v);
            for (j, &x) in xi.iter().enumerate() {
                v_mean.axpy(x, &c_mat.column(j), 1.0);
            }
            if let Some(set) = self.indicator {
                for (c, map) in set.constraints.iter().zip(&layout.indicator_maps) {
                    gather(p.as_slice(), map, &mut buf);
                    if c.value_ws(&buf) > 0.0 {
                        return Ok(());
                    }
                }
            }
            let g_pos = if position_only {
                None
            } else {
                for (i, (&pi, &vi)) in pos.iter().zip(vel).enumerate() {
                    x_node[pi] = p[i];
                    x_node[vi] = v_mean[i];
                }
                let g = self.system.diffusion(self.t, &x_node, self.control);
                Some(select(&g, pos, &(0..g.ncols()).collect::<Vec<_>>()))
            };

            for (j, (c, map)) in self.constraints.iter().zip(&layout.maps).enumerate() {
                if !on_grid[j] {
                    continue;
                }
                gather(p.as_slice(), map, &mut buf);
                let z = c.value_ws(&buf);
                if z >= 0.0 {
                    acc[j] += w;
                    continue;
                }
                let grad = c.gradient_ws(&buf)?;
                a_p.fill(0.0);
                for (&i, gi) in map.iter().zip(&grad) {
                    a_p[i] = *gi;
                }
                let m = a_p.dot(&v_mean);
                let s2 = a_p.dot(&(&cond_cov * &a_p)).max(0.0);

                let (sigma, h0) = match &g_pos {
                    None => (0.0, 0.0),
                    Some(gp) => {
                        let sigma = gp.tr_mul(&a_p).norm();
                        let h0 = if c.is_linear() {
                            0.0
                        } else {
                            let gs = select(gp, map, &(0..gp.ncols()).collect::<Vec<_>>());
                            0.5 * (gs.transpose() * c.hessian_ws(&buf)? * &gs).trace()
                        };
                        (sigma, h0)
                    }
                };

                let prob = if sigma * sigma * dt == 0.0 {
                    // Indicator 1(z + (u + h0) dt > 0) against u ~ N(m, s2), in closed form.
                    let shift = z / dt + m + h0;
                    if s2 <= DETERMINISTIC_VAR {
                        indicator(shift > 0.0)
                    } else {
                        normal::cdf(shift / s2.sqrt())
                    }
                } else if s2 <= DETERMINISTIC_VAR {
                    psi_unchecked(z, m + h0, sigma, dt)
                } else {
                    let s = s2.sqrt();
                    rule.nodes
                        .iter()
                        .zip(&rule.weights)
                        .map(|(nu, wu)| wu * psi_unchecked(z, m + s * nu + h0, sigma, dt))
                        .sum()
                };
                acc[j] += w * prob;
            }
            Ok(())
        })?;
        Ok(acc)
    }

    /// Position-only exit probability of a half-plane with the wall-normal
    /// coordinate integrated in closed form.
    ///
    /// The exit layer `-ż dt < z <= 0` is far thinner than a grid cell once
    /// `dt` is small, so a tensor grid over positions aliases against it. In
    /// whitened coordinates rotated so that `z = z0 + g ζ₁`, the layer is an
    /// interval in `ζ₁` for each `(ζ_rest, η)`, where `η` is the standardized
    /// residual of `ż` given the position. The safe-set indicator of the other
    /// constraints is evaluated on the wall. Returns `None` when `z` is
    /// deterministic or the constraint is not a half-plane.
    #[allow(clippy::too_many_arguments)]
    fn linear_layer(
        &self,
        c: &Constraint,
        map: &[usize],
        layout: &Layout,
        axes: &GaussianAxes,
        mu_v: &DVector<f64>,
        c_mat: &DMatrix<f64>,
        cond_cov: &DMatrix<f64>,
    ) -> Result<Option<f64>> {
        let Shape::HalfPlane { normal, offset } = c.shape() else {
            return Ok(None);
        };
        let d = axes.mean.len();
        let k = axes.rank();
        let mut a_p = DVector::zeros(d);
        for (&i, &ni) in map.iter().zip(normal) {
            a_p[i] = ni;
        }
        let z0 = a_p.dot(&axes.mean) - offset;
        let mut g = axes.directions.tr_mul(&a_p);
        for (gi, s) in g.iter_mut().zip(&axes.scales) {
            *gi *= s;
        }
        let g1 = g.norm();
        let boundary = -z0 / g1;
        if k == 0 || !(g1 > 0.0) || !boundary.is_finite() {
            return Ok(None);
        }

        let h = reflect_onto_first_axis(&g);
        let m_vec = h.tr_mul(&c_mat.tr_mul(&a_p));
        let m0 = a_p.dot(mu_v);
        let m1 = m_vec[0];
        let s = a_p.dot(&(cond_cov * &a_p)).max(0.0).sqrt();
        let dt = self.dt;
        let slope = g1 + dt * m1;

        let rest_dims = k - 1;
        let rule = NormalRule::new(self.spec.points_for(k), self.spec.box_halfwidth_sigmas);
        let eta_rule = if s * s > DETERMINISTIC_VAR {
            rule.clone()
        } else {
            NormalRule { nodes: vec![0.0], weights: vec![1.0] }
        };
        let rest_dirs = &axes.directions * DMatrix::from_diagonal(&DVector::from_column_slice(&axes.scales)) * &h;
        let mut zeta = DVector::zeros(k);
        let mut p = DVector::zeros(d);
        let mut buf = Vec::with_capacity(d);
        let inside = normal::cdf(boundary);
        let mut acc = 0.0;
        for_each_node(rest_dims, &rule, |xi, w| {
            zeta[0] = boundary;
            for (j, &x) in xi.iter().enumerate() {
                zeta[j + 1] = x;
            }
            if let Some(set) = self.indicator {
                p.copy_from(&axes.mean);
                p.gemv(1.0, &rest_dirs, &zeta, 1.0);
                for (other, omap) in set.constraints.iter().zip(&layout.indicator_maps) {
                    if other == c {
                        continue;
                    }
                    gather(p.as_slice(), omap, &mut buf);
                    if other.value_ws(&buf) > 0.0 {
                        return Ok(());
                    }
                }
            } else {
                acc += w * normal::sf(boundary);
            }
            let drift: f64 = m0 + xi.iter().zip(m_vec.iter().skip(1)).map(|(x, m)| x * m).sum::<f64>();
            let mut layer = 0.0;
            for (eta, we) in eta_rule.nodes.iter().zip(&eta_rule.weights) {
                // Exit iff slope · ζ₁ > r with ζ₁ <= boundary.
                let r = -z0 - dt * (drift + s * eta);
                let prob = if slope > 0.0 {
                    let lo = r / slope;
                    if lo < boundary { normal_interval(lo, boundary) } else { 0.0 }
                } else if slope < 0.0 {
                    normal::cdf((r / slope).min(boundary))
                } else {
                    indicator(r < 0.0) * inside
                };
                layer += we * prob;
            }
            acc += w * layer;
            Ok(())
        })?;
        Ok(Some(acc))
    }

    /// Position-only exit probability of a circle, integrated line by line.
    ///
    /// Lines run along the whitened gradient direction at the mean. On each
    /// line the chord inside the circle is closed form and the safe remainder
    /// is integrated adaptively on panels graded toward the chord ends, where
    /// the exit layer sits. Returns `None` for deterministic positions.
    #[allow(clippy::too_many_arguments)]
    fn circle_lines(
        &self,
        c: &Constraint,
        map: &[usize],
        layout: &Layout,
        axes: &GaussianAxes,
        mu_v: &DVector<f64>,
        c_mat: &DMatrix<f64>,
        cond_cov: &DMatrix<f64>,
    ) -> Result<Option<f64>> {
        let Shape::Circle { center, radius } = c.shape() else {
            return Ok(None);
        };
        let radius = *radius;
        let d = axes.mean.len();
        let k = axes.rank();
        if k == 0 {
            return Ok(None);
        }
        let scaled = &axes.directions * DMatrix::from_diagonal(&DVector::from_column_slice(&axes.scales));
        let q_mean: Vec<f64> = map.iter().zip(center).map(|(&i, ci)| axes.mean[i] - ci).collect();
        let q_norm = q_mean.iter().map(|q| q * q).sum::<f64>().sqrt();
        let mut grad = DVector::zeros(d);
        if q_norm > 0.0 {
            for (&i, qi) in map.iter().zip(&q_mean) {
                grad[i] = -qi / q_norm;
            }
        }
        let h = reflect_onto_first_axis(&scaled.tr_mul(&grad));
        let cols = &scaled * &h;
        let v_cols = c_mat * &h;
        let e: Vec<f64> = map.iter().map(|&i| cols[(i, 0)]).collect();
        let ee: f64 = e.iter().map(|x| x * x).sum();

        let reach = self.spec.box_halfwidth_sigmas + 3.0;
        let tol = 1e-10;
        let dt = self.dt;
        let rule = NormalRule::new(self.spec.points_for(k), self.spec.box_halfwidth_sigmas);
        let mut p0 = DVector::zeros(d);
        let mut v0 = DVector::zeros(d);
        let mut p = DVector::zeros(d);
        let mut a_p = DVector::zeros(d);
        let mut q0 = vec![0.0; map.len()];
        let mut buf = Vec::with_capacity(d);
        let mut acc = 0.0;

        for_each_node(k - 1, &rule, |xi, w| {
            p0.copy_from(&axes.mean);
            v0.copy_from(mu_v);
            for (j, &x) in xi.iter().enumerate() {
                p0.axpy(x, &cols.column(j + 1), 1.0);
                v0.axpy(x, &v_cols.column(j + 1), 1.0);
            }
            for ((q, &i), ci) in q0.iter_mut().zip(map).zip(center) {
                *q = p0[i] - ci;
            }
            let mut integrand = |z1: f64| -> f64 {
                let mut rho2 = 0.0;
                for (qi, ei) in q0.iter().zip(&e) {
                    let q = qi + ei * z1;
                    rho2 += q * q;
                }
                let rho = rho2.sqrt();
                let g = radius - rho;
                if g > 0.0 || rho == 0.0 {
                    return 0.0;
                }
                p.copy_from(&p0);
                p.axpy(z1, &cols.column(0), 1.0);
                if let Some(set) = self.indicator {
                    for (other, omap) in set.constraints.iter().zip(&layout.indicator_maps) {
                        if other == c {
                            continue;
                        }
                        gather(p.as_slice(), omap, &mut buf);
                        if other.value_ws(&buf) > 0.0 {
                            return 0.0;
                        }
                    }
                }
                a_p.fill(0.0);
                for ((&i, qi), ei) in map.iter().zip(&q0).zip(&e) {
                    a_p[i] = -(qi + ei * z1) / rho;
                }
                let m = a_p.dot(&v0) + z1 * a_p.dot(&v_cols.column(0));
                let s2 = a_p.dot(&(cond_cov * &a_p)).max(0.0);
                let shift = g / dt + m;
                let prob = if s2 <= DETERMINISTIC_VAR { indicator(shift > 0.0) } else { normal::cdf(shift / s2.sqrt()) };
                normal::pdf(z1) * prob
            };
            let mut integrate = |lo: f64, hi: f64, anchor: f64| -> f64 {
                graded_panels(lo, hi, anchor)
                    .windows(2)
                    .map(|pair| integrate_adaptive(&mut integrand, pair[0], pair[1], tol))
                    .sum()
            };

            let b: f64 = q0.iter().zip(&e).map(|(q, e)| q * e).sum();
            let cq: f64 = q0.iter().map(|q| q * q).sum::<f64>() - radius * radius;
            let disc = b * b - ee * cq;
            let line = if ee > 0.0 && disc > 0.0 {
                let root = disc.sqrt();
                let (za, zb) = ((-b - root) / ee, (-b + root) / ee);
                let mut sum = 0.0;
                if za > -reach {
                    sum += integrate(-reach, za.min(reach), za);
                }
                if zb < reach {
                    sum += integrate(zb.max(-reach), reach, zb);
                }
                if self.indicator.is_none() {
                    sum += normal_interval(za, zb);
                }
                sum
            } else {
                let closest = if ee > 0.0 { -b / ee } else { 0.0 };
                integrate(-reach, reach, closest)
            };
            acc += w * line;
            Ok(())
        })?;
        Ok(Some(acc))
    }
}
