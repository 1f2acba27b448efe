//! Dense real linear algebra: real Schur form by Hessenberg reduction and
//! shifted QR, eigenvalues, and the Bauer-Fike eigenvalue perturbation bound.

mod eigen;
mod schur;

pub use eigen::{
    bauer_fike_bound, condition_number_2, eigenvalues, eigenvectors, max_displacement,
    symmetric_eigen, SymmetricEigen,
};
pub use schur::{schur_decompose, SchurForm, DEFAULT_TOL};

use std::cmp::Ordering;
use std::ops::{Index, IndexMut};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[k * other.cols + j];
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let scale = frobenius_norm(self).max(f64::MIN_POSITIVE);
        for i in 0..self.rows {
            for j in 0..i {
                if (self[(i, j)] - self[(j, i)]).abs() > rel_tol * scale {
                    return false;
                }
            }
        }
        true
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Non-empty square matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix(Matrix);

impl SquareMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows != m.cols || m.rows == 0 {
            return Err(Error::Dimension(format!(
                "expected a non-empty square matrix, got {}x{}",
                m.rows, m.cols
            )));
        }
        if m.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension("matrix has non-finite entries".into()));
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn dim(&self) -> usize {
        self.0.rows
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }
}

impl std::ops::Deref for SquareMatrix {
    type Target = Matrix;
    fn deref(&self) -> &Matrix {
        &self.0
    }
}

/// Eigenvalues sorted by descending magnitude, ties broken by descending real
/// part and then descending imaginary part.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSpectrum {
    pub values: Vec<Complex64>,
}

impl EigenSpectrum {
    pub fn new(mut values: Vec<Complex64>) -> Self {
        values.sort_by(spectral_order);
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn real_parts(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.re).collect()
    }
}

pub(crate) fn spectral_order(a: &Complex64, b: &Complex64) -> Ordering {
    b.norm()
        .partial_cmp(&a.norm())
        .unwrap_or(Ordering::Equal)
        .then(b.re.partial_cmp(&a.re).unwrap_or(Ordering::Equal))
        .then(b.im.partial_cmp(&a.im).unwrap_or(Ordering::Equal))
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frobenius_cases() {
        assert_eq!(frobenius_norm(&Matrix::zeros(3, 4)), 0.0);
        for n in 1..6 {
            assert!((frobenius_norm(&Matrix::identity(n)) - (n as f64).sqrt()).abs() < 1e-15);
        }
        let m = Matrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(frobenius_norm(&m), 5.0);
    }

    #[test]
    fn square_matrix_validation() {
        assert!(SquareMatrix::new(Matrix::zeros(2, 3)).is_err());
        assert!(SquareMatrix::new(Matrix::zeros(0, 0)).is_err());
        let bad = Matrix::new(1, 1, vec![f64::NAN]).unwrap();
        assert!(SquareMatrix::new(bad).is_err());
    }

    #[test]
    fn spectrum_ordering() {
        let s = EigenSpectrum::new(vec![
            Complex64::new(-1.0, 0.0),
            Complex64::new(0.0, -1.0),
            Complex64::new(2.0, 0.0),
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 1.0),
        ]);
        let expected = [(2.0, 0.0), (1.0, 0.0), (0.0, 1.0), (0.0, -1.0), (-1.0, 0.0)];
        for (v, (re, im)) in s.values.iter().zip(expected) {
            assert_eq!((v.re, v.im), (re, im));
        }
    }
}
