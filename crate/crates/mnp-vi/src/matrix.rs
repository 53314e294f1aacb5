//! Dense row-major matrices and the small decomposition toolkit used across
//! the crate: Cholesky and LDLᵀ factorizations, PD inverses/log-determinants,
//! and reparameterized Gaussian sampling.
//!
//! Everything here is plain `f64` and sized for choice models (d ≤ ~50);
//! there is deliberately no sparse or blocked code.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from matrix construction and factorization.
#[derive(Debug, Error)]
pub enum MatrixError {
    /// A symmetric factorization hit a non-positive pivot: the input is not
    /// positive definite. `pivot` is the 0-based index of the failing pivot.
    #[error("matrix not positive definite: pivot {pivot} is {value:.6e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("dimension mismatch in {op}: {details}")]
    DimensionMismatch { op: &'static str, details: String },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
}

/// Dense matrix with row-major storage. Vectors are handled as `&[f64]`
/// throughout; `Matrix` is reserved for genuinely two-dimensional data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr", into = "MatrixRepr")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Serialized form of [`Matrix`]; deserialization revalidates shape and
/// finiteness through [`Matrix::from_vec`].
#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl From<Matrix> for MatrixRepr {
    fn from(m: Matrix) -> Self {
        MatrixRepr { rows: m.rows, cols: m.cols, data: m.data }
    }
}

impl TryFrom<MatrixRepr> for Matrix {
    type Error = MatrixError;

    fn try_from(repr: MatrixRepr) -> Result<Self, Self::Error> {
        if repr.rows == 0 || repr.cols == 0 {
            return Err(MatrixError::DimensionMismatch {
                op: "deserialize",
                details: format!("{}x{} matrix is empty", repr.rows, repr.cols),
            });
        }
        Matrix::from_vec(repr.rows, repr.cols, repr.data)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be >= 1");
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from row-major data, validating shape and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MatrixError> {
        if data.len() != rows * cols {
            return Err(MatrixError::DimensionMismatch {
                op: "from_vec",
                details: format!("{rows}x{cols} needs {} entries, got {}", rows * cols, data.len()),
            });
        }
        for (k, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(MatrixError::NonFinite { row: k / cols, col: k % cols });
            }
        }
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be >= 1");
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, MatrixError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(MatrixError::DimensionMismatch {
                    op: "from_rows",
                    details: format!("ragged rows: expected {c}, got {}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data)
    }

    /// Diagonal matrix from a vector.
    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &v) in diag.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &aik) in a_row.iter().enumerate() {
                let b_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += aik * b;
                }
            }
        }
        out
    }

    /// `self * rhsᵀ` without materializing the transpose.
    pub fn matmul_transpose_b(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, rhs.cols,
            "matmul_transpose_b shape mismatch: {}x{} * ({}x{})ᵀ",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = dot(a_row, rhs.row(j));
            }
        }
        out
    }

    /// `selfᵀ * rhs` without materializing the transpose.
    pub fn matmul_transpose_a(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(
            self.rows, rhs.rows,
            "matmul_transpose_a shape mismatch: ({}x{})ᵀ * {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
            for (i, &aki) in a_row.iter().enumerate() {
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += aki * b;
                }
            }
        }
        out
    }

    /// `self * v` for a vector `v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ * v`.
    pub fn matvec_transpose(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "matvec_transpose shape mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += vi * a;
            }
        }
        out
    }

    pub fn add(&self, rhs: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "add shape mismatch");
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, rhs: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "sub shape mismatch");
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, c: f64) -> Matrix {
        let data = self.data.iter().map(|a| a * c).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn trace(&self) -> f64 {
        assert_eq!(self.rows, self.cols, "trace requires a square matrix");
        (0..self.rows).map(|i| self.get(i, i)).sum()
    }

    /// `(self + selfᵀ)/2` — used before symmetric factorizations so that
    /// accumulated floating-point asymmetry cannot leak into pivots.
    pub fn symmetrized(&self) -> Matrix {
        assert_eq!(self.rows, self.cols, "symmetrized requires a square matrix");
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
        out
    }

    pub fn max_abs_diff(&self, rhs: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Lower-triangular Cholesky factor `G` with `G·Gᵀ = self`.
    /// The input is symmetrized first.
    pub fn cholesky(&self) -> Result<Matrix, MatrixError> {
        assert_eq!(self.rows, self.cols, "cholesky requires a square matrix");
        let n = self.rows;
        let s = self.symmetrized();
        let mut g = Matrix::zeros(n, n);
        for j in 0..n {
            let mut diag = s.get(j, j);
            for k in 0..j {
                diag -= g.get(j, k) * g.get(j, k);
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(MatrixError::NotPositiveDefinite { pivot: j, value: diag });
            }
            let diag = diag.sqrt();
            g.set(j, j, diag);
            for i in (j + 1)..n {
                let mut v = s.get(i, j);
                for k in 0..j {
                    v -= g.get(i, k) * g.get(j, k);
                }
                g.set(i, j, v / diag);
            }
        }
        Ok(g)
    }

    /// LDLᵀ factorization of a symmetric positive-definite matrix:
    /// returns `(L, D)` with `L` unit lower-triangular and `D` diagonal
    /// (as a full diagonal `Matrix`), such that `L·D·Lᵀ = self`.
    pub fn ldl_decompose(&self) -> Result<(Matrix, Matrix), MatrixError> {
        assert_eq!(self.rows, self.cols, "ldl_decompose requires a square matrix");
        let n = self.rows;
        let s = self.symmetrized();
        let mut l = Matrix::identity(n);
        let mut d = vec![0.0; n];
        for j in 0..n {
            let mut dj = s.get(j, j);
            for k in 0..j {
                dj -= l.get(j, k) * l.get(j, k) * d[k];
            }
            if !(dj > 0.0) || !dj.is_finite() {
                return Err(MatrixError::NotPositiveDefinite { pivot: j, value: dj });
            }
            d[j] = dj;
            for i in (j + 1)..n {
                let mut v = s.get(i, j);
                for k in 0..j {
                    v -= l.get(i, k) * l.get(j, k) * d[k];
                }
                l.set(i, j, v / dj);
            }
        }
        Ok((l, Matrix::from_diag(&d)))
    }

    /// log det of a symmetric PD matrix, via Cholesky (never via an explicit
    /// determinant product).
    pub fn logdet_pd(&self) -> Result<f64, MatrixError> {
        let g = self.cholesky()?;
        Ok(2.0 * (0..g.rows).map(|i| g.get(i, i).ln()).sum::<f64>())
    }

    /// Inverse of a symmetric PD matrix via its Cholesky factorization.
    pub fn inverse_pd(&self) -> Result<Matrix, MatrixError> {
        let g = self.cholesky()?;
        let n = self.rows;
        let mut inv = Matrix::zeros(n, n);
        // Solve G·Gᵀ·x = e_j column by column.
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.fill(0.0);
            e[j] = 1.0;
            let y = solve_lower(&g, &e);
            let x = solve_lower_transpose(&g, &y);
            for i in 0..n {
                inv.set(i, j, x[i]);
            }
        }
        // The result is symmetric up to rounding; enforce it exactly.
        Ok(inv.symmetrized())
    }
}

/// Dot product of two equal-length slices.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solve `L·y = b` for lower-triangular `L`.
pub fn solve_lower(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    assert_eq!(n, b.len(), "solve_lower shape mismatch");
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= l.get(i, k) * y[k];
        }
        y[i] = v / l.get(i, i);
    }
    y
}

/// Solve `Lᵀ·x = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    assert_eq!(n, b.len(), "solve_lower_transpose shape mismatch");
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in (i + 1)..n {
            v -= l.get(k, i) * x[k];
        }
        x[i] = v / l.get(i, i);
    }
    x
}

/// Reparameterized multivariate-normal draw: `mean + factor·z` where
/// `factor·factorᵀ` is the target covariance and `z` is standard normal.
/// Deterministic in `z`.
pub fn mvn_sample(mean: &[f64], factor: &Matrix, z: &[f64]) -> Result<Vec<f64>, MatrixError> {
    if factor.rows() != mean.len() || factor.cols() != z.len() {
        return Err(MatrixError::DimensionMismatch {
            op: "mvn_sample",
            details: format!(
                "mean {}, factor {}x{}, z {}",
                mean.len(),
                factor.rows(),
                factor.cols(),
                z.len()
            ),
        });
    }
    let mut out = factor.matvec(z);
    for (o, m) in out.iter_mut().zip(mean) {
        *o += m;
    }
    Ok(out)
}
