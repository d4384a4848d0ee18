//! Dense row-major matrix used for token, prototype and weight storage.

use std::ops::{Index, IndexMut};

use crate::error::{HpanError, Result};
use crate::scalar::Scalar;
use crate::verify::counter;

/// Row-major `rows x cols` matrix.
///
/// Token and prototype sets are stored one vector per row, so a linear map
/// `W` acts on them as `X * W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(HpanError::shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(HpanError::shape("ragged rows"));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::of(v.to_f64_lossy())).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: T, other: &Matrix<T>) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn row_norms(&self) -> Vec<T> {
        self.row_iter()
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect()
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[Matrix<T>]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(HpanError::shape("vstack column mismatch"));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Rows `start..start + count` as a new matrix.
    pub fn slice_rows(&self, start: usize, count: usize) -> Self {
        Matrix {
            rows: count,
            cols: self.cols,
            data: self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        gemm_into(self, false, rhs, false, T::one(), &mut out);
        out
    }

    /// `self^T * rhs`.
    pub fn t_matmul(&self, rhs: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.rows, rhs.rows, "t_matmul inner dimension mismatch");
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        gemm_into(self, true, rhs, false, T::one(), &mut out);
        out
    }

    /// `self * rhs^T`.
    pub fn matmul_t(&self, rhs: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, rhs.cols, "matmul_t inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        gemm_into(self, false, rhs, true, T::one(), &mut out);
        out
    }

    /// `self * rhs^T * alpha`, recorded as pairwise-interaction work.
    pub(crate) fn scores(&self, rhs: &Matrix<T>, alpha: T) -> Matrix<T> {
        assert_eq!(self.cols, rhs.cols, "scores inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        let macs = gemm_into(self, false, rhs, true, alpha, &mut out);
        counter::tag_interaction(macs);
        out
    }

    /// `self * rhs`, recorded as pairwise-interaction work.
    pub(crate) fn weighted_sum(&self, rhs: &Matrix<T>) -> Matrix<T> {
        let out = self.matmul(rhs);
        counter::tag_interaction((self.rows * self.cols * rhs.cols) as u64);
        out
    }
}

fn gemm_into<T: Scalar>(a: &Matrix<T>, ta: bool, b: &Matrix<T>, tb: bool, alpha: T, c: &mut Matrix<T>) -> u64 {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if tb { b.rows } else { b.cols };
    debug_assert_eq!(c.shape(), (m, n));
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    let macs = (m * k * n) as u64;
    counter::record(macs, ((m * k + k * n + m * n) * std::mem::size_of::<T>()) as u64);
    if m == 0 || n == 0 {
        return macs;
    }
    // SAFETY: strides describe the exact row-major buffers owned by `a`, `b`
    // and `c`; `c` is borrowed mutably and cannot alias the inputs.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            T::zero(),
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
    macs
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}
