use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Small dense real matrix. Entries are addressed row-major; storage is a
/// `nalgebra` matrix so products and factorizations use its kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    inner: DMatrix<f64>,
}

impl DenseMatrix {
    pub fn from_row_major(rows: usize, cols: usize, entries: &[f64]) -> Result<Self> {
        if rows == 0 || cols == 0 || entries.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} entries for a {rows}x{cols} matrix",
                entries.len()
            )));
        }
        Ok(Self { inner: DMatrix::from_row_slice(rows, cols, entries) })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { inner: DMatrix::zeros(rows, cols) }
    }

    pub fn identity(n: usize) -> Self {
        Self { inner: DMatrix::identity(n, n) }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self { inner: DMatrix::from_diagonal(&DVector::from_column_slice(diag)) }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl FnMut(usize, usize) -> f64) -> Self {
        Self { inner: DMatrix::from_fn(rows, cols, f) }
    }

    pub fn rows(&self) -> usize {
        self.inner.nrows()
    }

    pub fn cols(&self) -> usize {
        self.inner.ncols()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.inner[(row, col)]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.inner[(row, col)] = value;
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        self.inner.transpose().as_slice().to_vec()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.inner.diagonal().iter().copied().collect()
    }

    pub fn transpose(&self) -> Self {
        Self { inner: self.inner.transpose() }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols() != other.rows() {
            return Err(Error::ShapeMismatch {
                expected: (self.cols(), other.cols()),
                got: (other.rows(), other.cols()),
            });
        }
        Ok(Self { inner: &self.inner * &other.inner })
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols(), "matvec length");
        (&self.inner * DVector::from_column_slice(x)).as_slice().to_vec()
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other)?;
        Ok(Self { inner: &self.inner + &other.inner })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other)?;
        Ok(Self { inner: &self.inner - &other.inner })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { inner: &self.inner * factor }
    }

    pub fn max_abs(&self) -> f64 {
        self.inner.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `(A + Aᵀ) / 2`.
    pub fn symmetrized(&self) -> Self {
        Self { inner: (&self.inner + self.inner.transpose()) * 0.5 }
    }

    /// Rows and columns `idx` (in that order) as a square submatrix.
    pub fn principal_submatrix(&self, idx: &[usize]) -> Self {
        Self::from_fn(idx.len(), idx.len(), |i, j| self.inner[(idx[i], idx[j])])
    }

    /// `L·Lᵀ` for a lower-triangular `self`; entries above the diagonal
    /// are ignored.
    pub fn lower_gram(&self) -> Self {
        let lower = self.inner.lower_triangle();
        Self { inner: &lower * lower.transpose() }
    }

    pub fn lower_triangle(&self) -> Self {
        Self { inner: self.inner.lower_triangle() }
    }

    pub fn as_nalgebra(&self) -> &DMatrix<f64> {
        &self.inner
    }

    pub fn from_nalgebra(inner: DMatrix<f64>) -> Self {
        Self { inner }
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.inner.shape() != other.inner.shape() {
            return Err(Error::ShapeMismatch { expected: self.inner.shape(), got: other.inner.shape() });
        }
        Ok(())
    }
}

/// Cholesky factorization of a symmetric positive definite matrix.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
}

const SYMMETRY_TOL: f64 = 1e-10;

impl SpdFactor {
    pub fn new(m: &DenseMatrix) -> Result<Self> {
        let n = m.rows();
        if n != m.cols() {
            return Err(Error::Dimension(format!("{}x{} matrix is not square", n, m.cols())));
        }
        let scale = m.max_abs().max(f64::MIN_POSITIVE);
        for i in 0..n {
            for j in 0..i {
                if (m.get(i, j) - m.get(j, i)).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::NotPositiveDefinite(format!("asymmetric at ({i},{j})")));
                }
            }
        }
        if m.as_nalgebra().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entry".into()));
        }
        let chol = Cholesky::new(m.as_nalgebra().clone())
            .ok_or_else(|| Error::NotPositiveDefinite(format!("Cholesky failed on {n}x{n} matrix")))?;
        Ok(Self { chol })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        assert_eq!(rhs.len(), self.dim(), "rhs length");
        self.chol.solve(&DVector::from_column_slice(rhs)).as_slice().to_vec()
    }

    pub fn solve_matrix(&self, rhs: &DenseMatrix) -> DenseMatrix {
        DenseMatrix::from_nalgebra(self.chol.solve(rhs.as_nalgebra()))
    }

    /// `ln det`, from the factor's diagonal.
    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DenseMatrix {
        DenseMatrix::from_nalgebra(self.chol.inverse()).symmetrized()
    }

    /// The lower-triangular factor `L` with `m = L·Lᵀ`.
    pub fn lower(&self) -> DenseMatrix {
        DenseMatrix::from_nalgebra(self.chol.l())
    }

    /// `L·x`, used to draw correlated Gaussian vectors.
    pub fn lower_mul(&self, x: &[f64]) -> Vec<f64> {
        (self.chol.l() * DVector::from_column_slice(x)).as_slice().to_vec()
    }
}

/// Solution of an SPD system together with the log-determinant of the
/// matrix, both from one factorization.
#[derive(Clone, Debug)]
pub struct SpdSolution {
    pub x: Vec<f64>,
    pub log_det: f64,
}

pub fn spd_solve(m: &DenseMatrix, rhs: &[f64]) -> Result<SpdSolution> {
    if rhs.len() != m.rows() {
        return Err(Error::Dimension(format!("rhs of length {} for {}x{} matrix", rhs.len(), m.rows(), m.cols())));
    }
    let f = SpdFactor::new(m)?;
    Ok(SpdSolution { x: f.solve(rhs), log_det: f.log_det() })
}
