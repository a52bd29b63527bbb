//! Plant description and structural checks.

use crate::error::{Error, Result};
use crate::linalg::{min_eig, rank, Mat, Vector};

const TOL_SYM: f64 = 1e-9;
const TOL_PSD: f64 = 1e-9;
const TOL_RANK: f64 = 1e-10;

/// Linear plant `x⁺ = Ax + Bu + w` with quadratic output cost `xᵀQx + uᵀRu`.
///
/// The disturbance enters through the identity, so its dimension equals the
/// state dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    a: Mat,
    b: Mat,
    q: Mat,
    r: Mat,
}

impl SystemModel {
    /// Validates shapes, symmetry and definiteness, controllability of (A, B)
    /// and observability of (A, Q).
    pub fn new(a: Mat, b: Mat, q: Mat, r: Mat) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        if n == 0 || m == 0 {
            return Err(Error::InvalidModel("empty state or input dimension".into()));
        }
        if a.ncols() != n {
            return Err(Error::Dimension(format!("A is {}x{}, expected square", n, a.ncols())));
        }
        if b.nrows() != n {
            return Err(Error::Dimension(format!("B has {} rows, expected {n}", b.nrows())));
        }
        if q.shape() != (n, n) {
            return Err(Error::Dimension(format!("Q is {:?}, expected ({n}, {n})", q.shape())));
        }
        if r.shape() != (m, m) {
            return Err(Error::Dimension(format!("R is {:?}, expected ({m}, {m})", r.shape())));
        }
        for (name, s) in [("Q", &q), ("R", &r)] {
            if (s - s.transpose()).norm() > TOL_SYM * s.norm().max(1.0) {
                return Err(Error::InvalidModel(format!("{name} is not symmetric")));
            }
        }
        if min_eig(&q) < -TOL_PSD {
            return Err(Error::InvalidModel("Q is not positive semidefinite".into()));
        }
        if min_eig(&r) <= 1e-10 * r.norm().max(1.0) {
            return Err(Error::InvalidModel("R is not positive definite".into()));
        }
        let sys = Self { a, b, q, r };
        if !sys.is_controllable() {
            return Err(Error::InvalidModel("(A, B) is not controllable".into()));
        }
        if !sys.is_observable() {
            return Err(Error::InvalidModel("(A, C2) is not observable".into()));
        }
        Ok(sys)
    }

    /// Builds a model from row-major nested vectors.
    pub fn from_rows(a: &[Vec<f64>], b: &[Vec<f64>], q: &[Vec<f64>], r: &[Vec<f64>]) -> Result<Self> {
        use crate::linalg::from_rows;
        Self::new(from_rows(a)?, from_rows(b)?, from_rows(q)?, from_rows(r)?)
    }

    /// Scalar plant with A = a, B = b, Q = q, R = r.
    pub fn scalar(a: f64, b: f64, q: f64, r: f64) -> Result<Self> {
        let one = |v| Mat::from_element(1, 1, v);
        Self::new(one(a), one(b), one(q), one(r))
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }
    pub fn b(&self) -> &Mat {
        &self.b
    }
    pub fn q(&self) -> &Mat {
        &self.q
    }
    pub fn r(&self) -> &Mat {
        &self.r
    }
    /// State (and disturbance) dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    /// Input dimension.
    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// `Ax + Bu`
    pub fn drift(&self, x: &Vector, u: &Vector) -> Vector {
        &self.a * x + &self.b * u
    }

    pub fn is_controllable(&self) -> bool {
        let n = self.n();
        let mut blocks = Mat::zeros(n, n * self.m());
        let mut p = self.b.clone();
        for k in 0..n {
            blocks.columns_mut(k * self.m(), self.m()).copy_from(&p);
            p = &self.a * p;
        }
        rank(&blocks, TOL_RANK) == n
    }

    pub fn is_observable(&self) -> bool {
        let n = self.n();
        let mut blocks = Mat::zeros(n * n, n);
        let mut p = self.q.clone();
        for k in 0..n {
            blocks.rows_mut(k * n, n).copy_from(&p);
            p = &p * &self.a;
        }
        rank(&blocks, TOL_RANK) == n
    }
}
