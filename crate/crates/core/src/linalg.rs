//! Small dense linear-algebra helpers shared by the belief and simulation code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Slack allowed on negative eigenvalues before a covariance is rejected.
pub const PSD_SLACK: f64 = 1e-9;

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(1.0);
    (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol * scale))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// Fails when `m` has an eigenvalue below `-PSD_SLACK` (relative to its scale).
pub fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    let min = min_eigenvalue(m);
    if min < -PSD_SLACK * m.amax().max(1.0) || !min.is_finite() {
        return Err(Error::NotPositiveSemidefinite { min_eigenvalue: min });
    }
    Ok(())
}

/// A factor `L` with `L Lᵀ = m` for a PSD matrix, tolerant of rank deficiency.
pub fn psd_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_psd(m)?;
    let eig = SymmetricEigen::new(m.clone());
    let mut l = eig.eigenvectors.clone();
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        l.column_mut(j).scale_mut(s);
    }
    Ok(l)
}

/// Principal axes of a PSD matrix: `(eigenvalue, unit eigenvector)` pairs with
/// eigenvalues above `rel_floor * max_eigenvalue`, sorted by decreasing variance.
pub fn principal_axes(m: &DMatrix<f64>, rel_floor: f64) -> Vec<(f64, DVector<f64>)> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.max().max(0.0);
    if max <= 0.0 {
        return Vec::new();
    }
    let mut axes: Vec<(f64, DVector<f64>)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, &l)| l > rel_floor * max && l > 1e-300)
        .map(|(j, &l)| (l, eig.eigenvectors.column(j).into_owned()))
        .collect();
    axes.sort_by(|a, b| b.0.total_cmp(&a.0));
    axes
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix.
pub fn pinv_symmetric(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.amax();
    let cutoff = max * 1e-12 * n as f64;
    let mut out = DMatrix::zeros(n, n);
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        if l > cutoff && l > 0.0 {
            let v = eig.eigenvectors.column(j);
            out += (v * v.transpose()) / l;
        }
    }
    out
}

/// Exact zero-order-hold discretization of `dx = (F x + B u) dt + G dw` over `dt`.
///
/// Returns `(Φ, Γ, Q)` with `Φ = exp(F dt)`, `Γ = ∫ exp(F s) ds B` and
/// `Q = ∫ exp(F s) G Gᵀ exp(F s)ᵀ ds` (Van Loan's block-exponential method).
pub fn discretize(
    f: &DMatrix<f64>,
    b: &DMatrix<f64>,
    g: &DMatrix<f64>,
    dt: f64,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = f.nrows();
    let m = b.ncols();

    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(f * dt));
    aug.view_mut((0, n), (n, m)).copy_from(&(b * dt));
    let e = aug.exp();
    let phi = e.view((0, 0), (n, n)).into_owned();
    let gamma = e.view((0, n), (n, m)).into_owned();

    let w = g * g.transpose();
    let mut vl = DMatrix::zeros(2 * n, 2 * n);
    vl.view_mut((0, 0), (n, n)).copy_from(&(-f * dt));
    vl.view_mut((0, n), (n, n)).copy_from(&(&w * dt));
    vl.view_mut((n, n), (n, n)).copy_from(&(f.transpose() * dt));
    let ev = vl.exp();
    let m22 = ev.view((n, n), (n, n)).into_owned();
    let m12 = ev.view((0, n), (n, n)).into_owned();
    let mut q = m22.transpose() * m12;
    symmetrize(&mut q);
    (phi, gamma, q)
}
