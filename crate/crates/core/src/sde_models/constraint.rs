//! Smooth constraint functions `g(x) <= 0` and the safe set they intersect to.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of a single workspace constraint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    /// Disk obstacle: `g(p) = radius - ‖p - center‖`.
    Circle { center: Vec<f64>, radius: f64 },
    /// Linear wall: `g(p) = normalᵀp - offset`.
    HalfPlane { normal: Vec<f64>, offset: f64 },
}

impl Shape {
    pub fn workspace_dim(&self) -> usize {
        match self {
            Shape::Circle { center, .. } => center.len(),
            Shape::HalfPlane { normal, .. } => normal.len(),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Shape::HalfPlane { .. })
    }
}

/// A twice-differentiable constraint over the full state, depending only on
/// the state coordinates listed in `support`.
#[derive(Clone, Debug, PartialEq)]
pub struct Constraint {
    shape: Shape,
    support: Vec<usize>,
}

pub fn circle_obstacle(center: &[f64], radius: f64) -> Result<Constraint> {
    if center.is_empty() {
        return Err(Error::invalid("circle center must be non-empty"));
    }
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::invalid(format!("circle radius must be positive, got {radius}")));
    }
    if center.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("circle center must be finite"));
    }
    Ok(Constraint {
        shape: Shape::Circle {
            center: center.to_vec(),
            radius,
        },
        support: (0..center.len()).collect(),
    })
}

pub fn halfplane_constraint(normal: &[f64], offset: f64) -> Result<Constraint> {
    let norm = normal.iter().map(|n| n * n).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() || !offset.is_finite() {
        return Err(Error::invalid("half-plane normal must be non-zero and finite"));
    }
    Ok(Constraint {
        shape: Shape::HalfPlane {
            normal: normal.to_vec(),
            offset,
        },
        support: (0..normal.len()).collect(),
    })
}

impl Constraint {
    pub fn from_shape(shape: Shape) -> Result<Self> {
        match shape {
            Shape::Circle { center, radius } => circle_obstacle(&center, radius),
            Shape::HalfPlane { normal, offset } => halfplane_constraint(&normal, offset),
        }
    }

    /// Re-targets the constraint onto the given state coordinates.
    pub fn with_support(mut self, support: Vec<usize>) -> Result<Self> {
        if support.len() != self.shape.workspace_dim() {
            return Err(Error::DimensionMismatch {
                context: "constraint support",
                expected: self.shape.workspace_dim(),
                got: support.len(),
            });
        }
        self.support = support;
        Ok(self)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    /// State coordinates the constraint depends on.
    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn workspace_dim(&self) -> usize {
        self.support.len()
    }

    pub fn is_linear(&self) -> bool {
        self.shape.is_linear()
    }

    fn project(&self, x: &DVector<f64>) -> Vec<f64> {
        self.support.iter().map(|&i| x[i]).collect()
    }

    // ---- workspace-level evaluation (p = x[support]) ----

    pub fn value_ws(&self, p: &[f64]) -> f64 {
        match &self.shape {
            Shape::Circle { center, radius } => radius - dist(p, center),
            Shape::HalfPlane { normal, offset } => dot(normal, p) - offset,
        }
    }

    pub fn gradient_ws(&self, p: &[f64]) -> Result<Vec<f64>> {
        match &self.shape {
            Shape::Circle { center, .. } => {
                let r = dist(p, center);
                if r < 1e-12 {
                    return Err(Error::SingularPoint(format!("circle center {center:?}")));
                }
                Ok(p.iter().zip(center).map(|(pi, ci)| -(pi - ci) / r).collect())
            }
            Shape::HalfPlane { normal, .. } => Ok(normal.clone()),
        }
    }

    pub fn hessian_ws(&self, p: &[f64]) -> Result<DMatrix<f64>> {
        let d = self.workspace_dim();
        match &self.shape {
            Shape::Circle { center, .. } => {
                let r = dist(p, center);
                if r < 1e-12 {
                    return Err(Error::SingularPoint(format!("circle center {center:?}")));
                }
                let n = DVector::from_iterator(d, p.iter().zip(center).map(|(pi, ci)| (pi - ci) / r));
                Ok(-(DMatrix::identity(d, d) - &n * n.transpose()) / r)
            }
            Shape::HalfPlane { .. } => Ok(DMatrix::zeros(d, d)),
        }
    }

    // ---- state-level evaluation ----

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.value_ws(&self.project(x))
    }

    /// Gradient `a(x)` over the full state.
    pub fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let g = self.gradient_ws(&self.project(x))?;
        let mut out = DVector::zeros(x.len());
        for (k, &i) in self.support.iter().enumerate() {
            out[i] = g[k];
        }
        Ok(out)
    }

    /// Hessian `H(x)` over the full state.
    pub fn hessian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let h = self.hessian_ws(&self.project(x))?;
        let mut out = DMatrix::zeros(x.len(), x.len());
        for (a, &i) in self.support.iter().enumerate() {
            for (b, &j) in self.support.iter().enumerate() {
                out[(i, j)] = h[(a, b)];
            }
        }
        Ok(out)
    }
}

/// Intersection of constraint sublevel sets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SafeSet {
    pub constraints: Vec<Constraint>,
}

impl SafeSet {
    pub fn new(constraints: Vec<Constraint>) -> Self {
        Self { constraints }
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    /// `max_j g_j(x)`, or `-inf` for an unconstrained set.
    pub fn max_value(&self, x: &DVector<f64>) -> f64 {
        self.constraints
            .iter()
            .map(|c| c.value(x))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.max_value(x) <= 0.0
    }

    /// Index of the first violated constraint, if any.
    pub fn first_violated(&self, x: &DVector<f64>) -> Option<usize> {
        self.constraints.iter().position(|c| c.value(x) > 0.0)
    }

    /// Common workspace support when every constraint depends on the same coordinates.
    pub fn common_support(&self) -> Option<&[usize]> {
        let first = self.constraints.first()?.support();
        self.constraints
            .iter()
            .all(|c| c.support() == first)
            .then_some(first)
    }

    /// Membership over workspace coordinates; every constraint must share `support`.
    pub fn contains_ws(&self, p: &[f64]) -> bool {
        self.constraints.iter().all(|c| c.value_ws(p) <= 0.0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
