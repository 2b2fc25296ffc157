//! Property checks shared by the proptest suite and the acceptance runner.

use exitrisk::belief::{a_priori_beliefs, condition_on_safety, truncate_gaussian_1d, GaussianBelief};
use exitrisk::estimators::{Method, Problem, TimePartition};
use exitrisk::exit_kernel::{interval_exit_prob, psi, ExitMode, QuadratureSpec, Reduction};
use exitrisk::monte_carlo::{rollout, McConfig};
use exitrisk::sde_models::{
    dubins_system, halfplane_constraint, Constraint, ItoSystem, LinearSystem, SafeSet, Shape, Workspace,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use super::wall_fixture;

pub type PropResult = Result<(), TestCaseError>;

pub fn psi_grid() -> impl Strategy<Value = (f64, f64, f64, f64, f64)> {
    (-3.0..-1e-3f64, -3.0..3.0f64, 0.05..3.0f64, 1e-3..2.0f64, 1e-3..0.5f64)
}

/// Range and the four monotonicities of ψ, each under a relative step.
pub fn psi_shape((z, h, sigma, dt, step): (f64, f64, f64, f64, f64)) -> PropResult {
    let p = psi(z, h, sigma, dt).unwrap();
    let tol = 1e-12;
    prop_assert!((0.0..=1.0).contains(&p));
    prop_assert!(psi(z * (1.0 + step), h, sigma, dt).unwrap() <= p + tol, "not nonincreasing in |z|");
    prop_assert!(psi(z, h + step, sigma, dt).unwrap() >= p - tol, "not nondecreasing in h");
    prop_assert!(psi(z, h, sigma, dt * (1.0 + step)).unwrap() >= p - tol, "not nondecreasing in dt");
    if h <= 0.0 {
        prop_assert!(psi(z, h, sigma * (1.0 + step), dt).unwrap() >= p - tol, "not nondecreasing in sigma");
    }
    prop_assert_eq!(psi(-z, h, sigma, dt).unwrap(), 1.0);
    Ok(())
}

/// ψ at σ = 1e-6 matches the deterministic indicator away from `z + h dt = 0`.
pub fn psi_small_noise((z, h, dt): (f64, f64, f64)) -> PropResult {
    prop_assume!((z + h * dt).abs() > 1e-3);
    let limit = psi(z, h, 0.0, dt).unwrap();
    prop_assert_eq!(limit, if z + h * dt > 0.0 { 1.0 } else { 0.0 });
    let near = psi(z, h, 1e-6, dt).unwrap();
    prop_assert!((near - limit).abs() <= 1e-4, "{near} vs {limit}");
    Ok(())
}

pub fn shape() -> impl Strategy<Value = Shape> {
    prop_oneof![
        ((-2.0..2.0f64, -2.0..2.0f64), 0.1..2.0f64).prop_map(|((x, y), r)| Shape::Circle { center: vec![x, y], radius: r }),
        ((0.0..std::f64::consts::TAU), -2.0..2.0f64)
            .prop_map(|(a, o)| Shape::HalfPlane { normal: vec![a.cos(), a.sin()], offset: o }),
    ]
}

fn close(a: &[f64], b: &[f64], rel: f64) -> bool {
    let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= rel * scale)
}

/// Analytic gradient and Hessian of a constraint on the Dubins position
/// support against central differences, over the full state.
pub fn constraint_derivatives(shape: Shape, x: Vec<f64>) -> PropResult {
    if let Shape::Circle { center, .. } = &shape {
        prop_assume!(((x[0] - center[0]).powi(2) + (x[1] - center[1]).powi(2)).sqrt() > 0.05);
    }
    let c = Constraint::from_shape(shape).unwrap().with_support(vec![0, 1]).unwrap();
    let x = DVector::from_vec(x);
    let n = x.len();
    let grad = c.gradient(&x).unwrap();
    let hess = c.hessian(&x).unwrap();
    let bump = |i: usize, eps: f64| {
        let mut y = x.clone();
        y[i] += eps;
        y
    };
    let eps = 1e-6;
    let fd: Vec<f64> = (0..n).map(|i| (c.value(&bump(i, eps)) - c.value(&bump(i, -eps))) / (2.0 * eps)).collect();
    prop_assert!(close(grad.as_slice(), &fd, 1e-5), "gradient {grad} vs {fd:?}");
    let eps = 1e-5;
    for i in 0..n {
        let col = (c.gradient(&bump(i, eps)).unwrap() - c.gradient(&bump(i, -eps)).unwrap()) / (2.0 * eps);
        let analytic: Vec<f64> = hess.column(i).iter().copied().collect();
        prop_assert!(close(&analytic, col.as_slice(), 1e-4), "hessian column {i}");
    }
    prop_assert!(hess.relative_eq(&hess.transpose(), 1e-14, 1e-14));
    for i in 2..n {
        prop_assert_eq!(grad[i], 0.0);
    }
    Ok(())
}

/// Membership and the constraint maximum do not depend on list order.
pub fn safe_set_order(shapes: Vec<Shape>, shuffled: Vec<Shape>, p: (f64, f64)) -> PropResult {
    let build = |s: &[Shape]| SafeSet::new(s.iter().cloned().map(|s| Constraint::from_shape(s).unwrap()).collect());
    let (a, b) = (build(&shapes), build(&shuffled));
    let x = DVector::from_vec(vec![p.0, p.1]);
    prop_assert_eq!(a.contains(&x), b.contains(&x));
    prop_assert_eq!(a.max_value(&x), b.max_value(&x));
    prop_assert_eq!(a.contains(&x), a.max_value(&x) <= 0.0);
    Ok(())
}

/// The Dubins velocity drift `c R(θ) e₁` has norm `|c|`.
pub fn dubins_drift_norm(theta: f64, c: f64, alpha: f64) -> PropResult {
    let sys = dubins_system(0.1, 1e-4, 60.0).unwrap();
    let x = DVector::from_vec(vec![0.3, -0.2, 1.0, 0.5, theta, 0.1]);
    let f = sys.drift(0.0, &x, &DVector::from_vec(vec![c, alpha]));
    prop_assert!((f[2].hypot(f[3]) - c.abs()).abs() <= 1e-12 * c.abs().max(1.0));
    Ok(())
}

fn check_psd(cov: &DMatrix<f64>) -> PropResult {
    let scale = cov.amax().max(1.0);
    prop_assert!((cov - cov.transpose()).amax() <= 1e-12 * scale, "asymmetric covariance");
    let min = cov.symmetric_eigenvalues().min();
    prop_assert!(min >= -1e-9 * scale, "min eigenvalue {min}");
    Ok(())
}

/// A-priori beliefs stay symmetric PSD over 500 control ticks.
pub fn covariance_stays_psd(noise: f64, rate: f64, init_var: f64) -> PropResult {
    let ticks = 500;
    let horizon = ticks as f64 / rate;
    let fx = wall_fixture(noise, 1.0, 1e3, horizon, rate, init_var);
    let times: Vec<f64> = (0..=ticks).map(|k| k as f64 / rate).collect();
    let beliefs = a_priori_beliefs(&fx.system, &fx.design, &fx.initial, &times).unwrap();
    prop_assert_eq!(beliefs.len(), ticks + 1);
    for b in &beliefs {
        check_psd(&b.cov)?;
    }
    Ok(())
}

/// Truncation mass is nondecreasing in the bound and never inflates variance.
pub fn truncation_monotone(mean: f64, var: f64, lo: f64, gap: f64) -> PropResult {
    let (Ok(a), Ok(b)) = (truncate_gaussian_1d(mean, var, lo), truncate_gaussian_1d(mean, var, lo + gap)) else {
        return Err(TestCaseError::reject("degenerate truncation"));
    };
    prop_assert!(a.mass <= b.mass);
    prop_assert!(a.var <= var && b.var <= var);
    prop_assert!(a.mean <= mean && a.mean <= lo + 1e-9 * lo.abs().max(1.0));
    Ok(())
}

pub fn random_cov(entries: &[f64], n: usize, floor: f64) -> DMatrix<f64> {
    let l = DMatrix::from_fn(n, n, |i, j| if j <= i { entries[i * n + j] } else { 0.0 });
    &l * l.transpose() + DMatrix::identity(n, n) * floor
}

/// Conditioning on `g <= 0` does not raise `g` at the mean.
pub fn conditioning_lowers_g(shape: Shape, mean: (f64, f64), entries: Vec<f64>) -> PropResult {
    let c = Constraint::from_shape(shape).unwrap();
    let m = DVector::from_vec(vec![mean.0, mean.1]);
    if let Shape::Circle { center, .. } = c.shape() {
        prop_assume!((m[0] - center[0]).hypot(m[1] - center[1]) > 1e-3);
    }
    let belief = GaussianBelief::new(m.clone(), random_cov(&entries, 2, 1e-4), 0.0).unwrap();
    let Ok((after, mass)) = condition_on_safety(&belief, &SafeSet::new(vec![c.clone()])) else {
        return Err(TestCaseError::reject("degenerate"));
    };
    prop_assert!((0.0..=1.0).contains(&mass));
    let (g0, g1) = (c.value(&m), c.value(&after.mean));
    prop_assert!(g1 <= g0 + 1e-12 * g0.abs().max(1.0), "g rose from {g0} to {g1}");
    check_psd(&after.cov)
}

/// Rollouts record the first exit: shrinking the safe set can only bring the
/// exit forward, and the recorded state violates the recorded constraint.
pub fn first_exit_semantics(noise: f64, walls: (f64, f64), seed: u64, index: usize) -> PropResult {
    let (near, far) = (walls.0.min(walls.1), walls.0.max(walls.1));
    let fx = wall_fixture(noise, 1.0, far, 1.0, 20.0, 0.01);
    let x0 = fx.design.nominal.states[0].clone();
    let cfg = McConfig::new(1, seed).with_substeps(5);
    let wide = rollout(&fx.system, &fx.safe_set, &fx.design, &x0, &cfg, index).unwrap();
    let narrow_set = SafeSet::new(vec![halfplane_constraint(&[1.0], near).unwrap()]);
    let narrow = rollout(&fx.system, &narrow_set, &fx.design, &x0, &cfg, index).unwrap();
    let both_set = SafeSet::new(vec![fx.safe_set.constraints[0].clone(), narrow_set.constraints[0].clone()]);
    let both = rollout(&fx.system, &both_set, &fx.design, &x0, &cfg, index).unwrap();

    let t = |o: &exitrisk::monte_carlo::RolloutOutcome| o.exit_time.unwrap_or(f64::INFINITY);
    prop_assert!(t(&narrow) <= t(&wide));
    prop_assert_eq!(t(&both), t(&narrow));
    for (o, set) in [(&wide, &fx.safe_set), (&narrow, &narrow_set), (&both, &both_set)] {
        match (o.exit_time, o.exit_constraint) {
            (Some(time), Some(j)) => {
                prop_assert!(set.constraints[j].value(&o.final_state) > 0.0);
                prop_assert_eq!(set.first_violated(&o.final_state), Some(j));
                let substeps = time / (1.0 / 20.0 / 5.0);
                prop_assert!((substeps - substeps.round()).abs() < 1e-6, "exit off the substep grid at {time}");
            }
            (None, None) => prop_assert!(set.contains(&o.final_state)),
            _ => prop_assert!(false, "inconsistent outcome"),
        }
    }
    Ok(())
}

/// Totals are `min(1, Σ contributions)` with nonnegative contributions and
/// monotone cumulative curves.
pub fn clamping(noise: f64, wall: f64, dt: f64) -> PropResult {
    let fx = wall_fixture(noise, 1.0, wall, 1.0, 40.0, 0.01);
    let spec = QuadratureSpec::new(Reduction::PositionOnly);
    let problem = Problem { system: &fx.system, safe_set: &fx.safe_set, design: &fx.design, initial: &fx.initial, spec: &spec };
    let partition = TimePartition::uniform(1.0, dt).unwrap();
    for m in Method::ALL {
        let r = problem.estimate(m, &partition).unwrap();
        prop_assert!(r.per_interval.iter().all(|c| *c >= 0.0 && c.is_finite()));
        let expected = if r.saturated { 1.0 } else { r.raw_sum().min(1.0) };
        prop_assert_eq!(r.total, expected, "{}", m);
        prop_assert!((0.0..=1.0).contains(&r.total));
        let cum = r.cumulative();
        prop_assert!(cum.windows(2).all(|w| w[1] >= w[0]));
        if !r.saturated {
            prop_assert_eq!(*cum.last().unwrap(), r.total);
        }
    }
    Ok(())
}

pub fn planar_double_integrator(noise: f64) -> LinearSystem {
    let mut a = DMatrix::zeros(4, 4);
    a[(0, 2)] = 1.0;
    a[(1, 3)] = 1.0;
    let mut b = DMatrix::zeros(4, 2);
    b[(2, 0)] = 1.0;
    b[(3, 1)] = 1.0;
    let mut g = DMatrix::zeros(4, 2);
    g[(2, 0)] = noise;
    g[(3, 1)] = noise;
    LinearSystem::new(a, b, g)
        .unwrap()
        .with_workspace(Workspace { position: vec![0, 1], velocity: vec![2, 3] })
        .unwrap()
}

#[derive(Clone, Debug)]
pub struct ReductionCase {
    pub noise: f64,
    pub shape: Shape,
    pub mean: Vec<f64>,
    pub entries: Vec<f64>,
    pub dt: f64,
}

pub fn reduction_case() -> impl Strategy<Value = ReductionCase> {
    let shape = prop_oneof![
        (0.6..1.2f64, 0.2..0.6f64).prop_map(|(x, r)| Shape::Circle { center: vec![x + r, 0.0], radius: r }),
        (0.0..std::f64::consts::TAU, 0.6..1.2f64)
            .prop_map(|(a, o)| Shape::HalfPlane { normal: vec![a.cos(), a.sin()], offset: o }),
    ];
    (
        0.0..1.0f64,
        shape,
        prop::collection::vec(-0.2..0.2f64, 2),
        prop::collection::vec(-1.5..1.5f64, 2),
        prop::collection::vec(-0.15..0.15f64, 16),
        0.01..0.25f64,
    )
        .prop_map(|(noise, shape, p, v, entries, dt)| ReductionCase {
            noise,
            shape,
            mean: [p, v].concat(),
            entries,
            dt,
        })
}

/// Interval exit probabilities of the three reductions on one planar
/// double-integrator belief, `[full, position_only, position_plus_scalar_drift]`.
pub fn reductions(case: &ReductionCase, mode: ExitMode) -> [f64; 3] {
    let sys = planar_double_integrator(case.noise);
    let c = Constraint::from_shape(case.shape.clone()).unwrap();
    let set = SafeSet::new(vec![c]);
    let belief = GaussianBelief::new(DVector::from_vec(case.mean.clone()), random_cov(&case.entries, 4, 1e-4), 0.0).unwrap();
    let u = DVector::zeros(2);
    [Reduction::Full, Reduction::PositionOnly, Reduction::PositionPlusScalarDrift].map(|r| {
        interval_exit_prob(&sys, &set, &belief, &u, 0.0, case.dt, &QuadratureSpec::new(r), mode).unwrap().total
    })
}

pub fn reduction_equivalence(case: ReductionCase) -> PropResult {
    for mode in [ExitMode::Plain, ExitMode::SafeWeighted] {
        let [full, po, ps] = reductions(&case, mode);
        prop_assert!((po - full).abs() <= 1e-3, "{mode:?}: position_only {po} vs full {full}");
        prop_assert!((ps - full).abs() <= 1e-3, "{mode:?}: scalar drift {ps} vs full {full}");
    }
    Ok(())
}
