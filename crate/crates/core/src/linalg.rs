//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// (X + Xᵀ) / 2
pub fn sym(x: &Mat) -> Mat {
    (x + x.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part of `x`.
pub fn min_eig(x: &Mat) -> f64 {
    if x.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(sym(x)).eigenvalues.min()
}

/// Scale-aware positive-definiteness test: min eig(sym X) > 1e-10 · max(1, ‖X‖_F).
pub fn is_pd(x: &Mat) -> bool {
    min_eig(x) > pd_tolerance(x)
}

pub fn pd_tolerance(x: &Mat) -> f64 {
    1e-10 * x.norm().max(1.0)
}

pub fn identity(n: usize) -> Mat {
    Mat::identity(n, n)
}

/// Solve `a · X = b` for symmetric positive-definite `a`, falling back to LU.
pub fn spd_solve(a: &Mat, b: &Mat) -> Result<Mat> {
    if let Some(ch) = sym(a).cholesky() {
        return Ok(ch.solve(b));
    }
    a.clone().lu().solve(b).ok_or_else(|| Error::NumericalFailure("singular linear system".into()))
}

pub fn quad(x: &Vector, m: &Mat) -> f64 {
    (x.transpose() * m * x)[(0, 0)]
}

/// Relative Frobenius distance ‖a − b‖_F / max(1, ‖a‖_F).
pub fn rel_diff(a: &Mat, b: &Mat) -> f64 {
    (a - b).norm() / a.norm().max(1.0)
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    Ok(Mat::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

/// Numerical rank via singular values, relative tolerance.
pub fn rank(m: &Mat, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > rel_tol * max).count()
}

pub fn spectral_radius(m: &Mat) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}
