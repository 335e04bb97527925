//! Small dense-matrix helpers shared by the estimators.
//!
//! Every inverse of a symmetric matrix goes through [`spd_inverse`], which
//! checks the spectral condition number against [`COND_LIMIT`] before
//! factorising. That gives every estimator the same deterministic failure
//! mode on rank-deficient designs.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Largest condition number accepted before a matrix is declared singular.
pub const COND_LIMIT: f64 = 1e12;

/// Relative tolerance for the psd repair of long-run variance matrices.
pub const PSD_TOL: f64 = 1e-10;

/// Which error a failed inversion maps to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Singular {
    Design,
    Weighting,
    Pd,
}

impl Singular {
    fn err(self, what: &str) -> Error {
        match self {
            Singular::Design => Error::SingularDesign(what.to_string()),
            Singular::Weighting => Error::SingularWeighting(what.to_string()),
            Singular::Pd => Error::NotPd(what.to_string()),
        }
    }
}

pub fn sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part of `a`, ascending.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(sym(a)).eigenvalues.iter().copied().collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    ev
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(a).first().copied().unwrap_or(0.0)
}

/// Spectral condition number of a symmetric matrix; infinite if not pd.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let ev = sym_eigenvalues(a);
    match (ev.first(), ev.last()) {
        (Some(&lo), Some(&hi)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// Inverse of a symmetric positive definite matrix.
///
/// Fails with the error selected by `kind` when the matrix is not pd or its
/// condition number exceeds [`COND_LIMIT`]. Cholesky is tried first, with an
/// SVD pseudo-inverse (relative cutoff 1e-12) as fallback.
pub fn spd_inverse(a: &DMatrix<f64>, kind: Singular, what: &str) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::DimensionMismatch(format!("{what}: not square")));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    check_condition(a, kind, what)?;
    let s = sym(a);
    let hi = max_abs(&s);
    match s.clone().cholesky() {
        Some(ch) => Ok(sym(&ch.inverse())),
        None => s
            .pseudo_inverse(1e-12 * hi)
            .map(|m| sym(&m))
            .map_err(|e| kind.err(&format!("{what}: {e}"))),
    }
}

/// Solves `a x = b` for symmetric pd `a`.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>, kind: Singular, what: &str) -> Result<DMatrix<f64>> {
    check_condition(a, kind, what)?;
    match sym(a).cholesky() {
        Some(ch) => Ok(ch.solve(b)),
        None => Ok(spd_inverse(a, kind, what)? * b),
    }
}

/// Vector right-hand side version of [`spd_solve`].
pub fn spd_solve_vec(a: &DMatrix<f64>, b: &DVector<f64>, kind: Singular, what: &str) -> Result<DVector<f64>> {
    let m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    Ok(spd_solve(a, &m, kind, what)?.column(0).into_owned())
}

/// Fails unless `a` is symmetric pd with condition number below [`COND_LIMIT`].
pub fn check_condition(a: &DMatrix<f64>, kind: Singular, what: &str) -> Result<f64> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch(format!("{what}: not square")));
    }
    if a.nrows() == 0 {
        return Ok(1.0);
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(kind.err(&format!("{what}: non-finite entries")));
    }
    let ev = sym_eigenvalues(a);
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    if hi <= 0.0 || lo <= hi / COND_LIMIT {
        return Err(kind.err(&format!("{what}: condition number {:.3e}", hi / lo.max(0.0))));
    }
    Ok(hi / lo)
}

/// `a^{-1/2}` for symmetric pd `a`.
pub fn inv_sqrt(a: &DMatrix<f64>, kind: Singular, what: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(sym(a));
    let hi = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if hi <= 0.0 || lo <= hi / COND_LIMIT {
        return Err(kind.err(&format!("{what}: not invertible")));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
    Ok(sym(&(&eig.eigenvectors * d * eig.eigenvectors.transpose())))
}

/// Symmetrises `a` and clips tiny negative eigenvalues to zero.
///
/// Eigenvalues in `(-PSD_TOL * |a|, 0)` are set to zero; anything more
/// negative is reported as [`Error::NotPsd`].
pub fn psd_repair(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let s = sym(a);
    if s.nrows() == 0 {
        return Ok(s);
    }
    let eig = SymmetricEigen::new(s.clone());
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let lo = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if lo >= 0.0 {
        return Ok(s);
    }
    if lo < -PSD_TOL * scale {
        return Err(Error::NotPsd(format!("{what}: min eigenvalue {lo:.3e}")));
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let d = DMatrix::from_diagonal(&clipped);
    Ok(sym(&(&eig.eigenvectors * d * eig.eigenvectors.transpose())))
}

pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Stacks matrices with equal column counts vertically.
pub fn vstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(*b);
        r += b.nrows();
    }
    out
}

/// Stacks matrices with equal row counts horizontally.
pub fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        out.view_mut((0, c), (rows, b.ncols())).copy_from(*b);
        c += b.ncols();
    }
    out
}

/// Column-stacking `vec` of a matrix.
pub fn vec_of(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(a.as_slice())
}

/// Inverse of [`vec_of`].
pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

/// Largest absolute entry.
pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// `max |a - b| / max |b|`.
pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    max_abs(&(a - b)) / max_abs(b).max(1e-300)
}

/// Quadratic form `d' v^{-1} d` used by every Wald statistic.
///
/// When `v` is numerically singular the statistic is zero if `d` vanishes
/// (an exact fit with identical regimes) and infinite otherwise.
pub fn wald_form(d: &DVector<f64>, v: &DMatrix<f64>, scale: f64) -> f64 {
    match spd_inverse(v, Singular::Design, "Wald covariance") {
        Ok(inv) => (d.transpose() * inv * d)[(0, 0)].max(0.0),
        Err(_) => {
            if d.amax() <= 1e-8 * scale.max(1.0) {
                0.0
            } else {
                f64::INFINITY
            }
        }
    }
}
