use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::normal;

/// Eigenvalues below this fraction of the largest are collapsed to a point.
const AXIS_REL_FLOOR: f64 = 1e-12;

/// Upper bound on tensor-grid nodes for a single quadrature.
pub const MAX_GRID_NODES: usize = 20_000_000;

/// Which coordinates are integrated numerically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Every state coordinate: a grid over all principal axes but one, and
    /// an adaptive rule along the constraint normal.
    Full,
    /// Grid over workspace positions plus a 1-D rule over the projected velocity.
    PositionPlusScalarDrift,
    /// Grid over workspace positions; the velocity is integrated in closed form.
    /// Requires zero diffusion on the position rows.
    PositionOnly,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureSpec {
    /// `None` selects a default from the integration dimension.
    pub points_per_axis: Option<usize>,
    pub box_halfwidth_sigmas: f64,
    pub reduction: Reduction,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self::new(Reduction::Full)
    }
}

impl QuadratureSpec {
    pub fn new(reduction: Reduction) -> Self {
        Self { points_per_axis: None, box_halfwidth_sigmas: 5.0, reduction }
    }

    pub fn with_points(mut self, points: usize) -> Self {
        self.points_per_axis = Some(points);
        self
    }

    pub fn with_box(mut self, sigmas: f64) -> Self {
        self.box_halfwidth_sigmas = sigmas;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.points_per_axis {
            if p < 3 {
                return Err(Error::invalid(format!("points_per_axis must be >= 3, got {p}")));
            }
        }
        if !(self.box_halfwidth_sigmas >= 3.0) || !self.box_halfwidth_sigmas.is_finite() {
            return Err(Error::invalid(format!(
                "box_halfwidth_sigmas must be a finite value >= 3, got {}",
                self.box_halfwidth_sigmas
            )));
        }
        Ok(())
    }

    /// Points per axis for a grid of `dims` integration dimensions.
    pub fn points_for(&self, dims: usize) -> usize {
        self.points_per_axis.unwrap_or(match dims {
            0..=2 => 81,
            3 => 41,
            4 => 21,
            _ => 11,
        })
    }
}

/// Midpoint rule for a standard normal on `[-L, L]` with `n` equal cells.
///
/// Weights are exact cell masses; the two outer cells absorb the tails, so the
/// weights sum to one.
#[derive(Clone, Debug)]
pub(crate) struct NormalRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl NormalRule {
    pub fn new(points: usize, halfwidth: f64) -> Self {
        let width = 2.0 * halfwidth / points as f64;
        let edge = |i: usize| {
            if i == 0 {
                f64::NEG_INFINITY
            } else if i == points {
                f64::INFINITY
            } else {
                -halfwidth + i as f64 * width
            }
        };
        let nodes = (0..points).map(|i| -halfwidth + (i as f64 + 0.5) * width).collect();
        let weights = (0..points)
            .map(|i| {
                let (lo, hi) = (edge(i), edge(i + 1));
                // Use the upper tail on the right half to avoid cancellation.
                if lo >= 0.0 {
                    normal::sf(lo) - normal::sf(hi)
                } else {
                    normal::cdf(hi) - normal::cdf(lo)
                }
            })
            .collect();
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }
}

/// Principal-axis factorization `x = mean + E ξ`, `ξ ~ N(0, I_k)`.
#[derive(Clone, Debug)]
pub(crate) struct GaussianAxes {
    pub mean: DVector<f64>,
    /// Unit eigenvectors, one column per retained axis.
    pub directions: DMatrix<f64>,
    /// Standard deviation along each retained axis.
    pub scales: Vec<f64>,
}

impl GaussianAxes {
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        linalg::check_psd(cov)?;
        let axes = linalg::principal_axes(cov, AXIS_REL_FLOOR);
        let d = mean.len();
        let mut directions = DMatrix::zeros(d, axes.len());
        let mut scales = Vec::with_capacity(axes.len());
        for (j, (lambda, v)) in axes.iter().enumerate() {
            directions.set_column(j, v);
            scales.push(lambda.sqrt());
        }
        Ok(Self { mean, directions, scales })
    }

    pub fn rank(&self) -> usize {
        self.scales.len()
    }

    /// Writes `mean + Σ_j ξ_j s_j e_j` into `out`.
    pub fn point(&self, xi: &[f64], out: &mut DVector<f64>) {
        out.copy_from(&self.mean);
        for (j, (&x, &s)) in xi.iter().zip(&self.scales).enumerate() {
            out.axpy(x * s, &self.directions.column(j), 1.0);
        }
    }
}

/// Visits every node of the `dims`-fold tensor product of `rule`.
pub(crate) fn for_each_node(
    dims: usize,
    rule: &NormalRule,
    mut visit: impl FnMut(&[f64], f64) -> Result<()>,
) -> Result<()> {
    let n = rule.len();
    let total = (n as f64).powi(dims as i32);
    if total > MAX_GRID_NODES as f64 {
        return Err(Error::invalid(format!(
            "quadrature grid of {n}^{dims} nodes exceeds the limit of {MAX_GRID_NODES}; lower points_per_axis"
        )));
    }
    let mut idx = vec![0usize; dims];
    let mut xi = vec![0.0; dims];
    loop {
        let mut w = 1.0;
        for (k, &i) in idx.iter().enumerate() {
            xi[k] = rule.nodes[i];
            w *= rule.weights[i];
        }
        visit(&xi, w)?;
        let mut k = 0;
        loop {
            if k == dims {
                return Ok(());
            }
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
/// Gauss weights on the odd Kronrod nodes.
const GAUSS_WEIGHTS: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// 15-point Kronrod estimate and its difference from the embedded 7-point Gauss rule.
fn gauss_kronrod<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = GK_WEIGHTS[7] * fc;
    let mut gauss = GAUSS_WEIGHTS[3] * fc;
    for i in 0..7 {
        let dx = h * GK_NODES[i];
        let pair = f(c - dx) + f(c + dx);
        kronrod += GK_WEIGHTS[i] * pair;
        if i % 2 == 1 {
            gauss += GAUSS_WEIGHTS[i / 2] * pair;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Adaptive Gauss–Kronrod integral of `f` over `[a, b]` to absolute tolerance `tol`.
pub(crate) fn integrate_adaptive<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64, tol: f64) -> f64 {
    fn recurse<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let (value, err) = gauss_kronrod(f, a, b);
        if err <= tol || depth == 0 {
            return value;
        }
        let m = 0.5 * (a + b);
        recurse(f, a, m, 0.5 * tol, depth - 1) + recurse(f, m, b, 0.5 * tol, depth - 1)
    }
    if b <= a {
        return 0.0;
    }
    recurse(f, a, b, tol, 40)
}

/// Panel edges on `[lo, hi]`, geometrically refined toward `anchor`.
pub(crate) fn graded_panels(lo: f64, hi: f64, anchor: f64) -> Vec<f64> {
    const FIRST: f64 = 1e-7;
    let mut edges = vec![lo, hi];
    let anchor = anchor.clamp(lo, hi);
    edges.push(anchor);
    let mut d = FIRST;
    while anchor - d > lo || anchor + d < hi {
        if anchor - d > lo {
            edges.push(anchor - d);
        }
        if anchor + d < hi {
            edges.push(anchor + d);
        }
        d *= 4.0;
    }
    edges.sort_by(f64::total_cmp);
    edges.dedup();
    edges
}
