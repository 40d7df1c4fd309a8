// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major matrices and the handful of kernels the toolkit needs.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
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
            return Err(Error::dims(
                "Matrix::from_vec",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dims(
                    "Matrix::from_rows",
                    format!("{cols} columns"),
                    format!("{} in row {i}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
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
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Element-wise sum; shapes must agree.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape("Matrix::add", other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape("Matrix::add_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self + I`; the matrix must be square.
    pub fn plus_identity(&self) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::dims("plus_identity", "square matrix", format!("{}x{}", self.rows, self.cols)));
        }
        let mut m = self.clone();
        for i in 0..self.rows {
            m[(i, i)] += T::one();
        }
        Ok(m)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape("Matrix::sub", other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn row_sums(&self) -> Vec<T> {
        (0..self.rows).map(|r| self.row(r).iter().copied().sum()).collect()
    }

    /// True when every strictly-upper-triangular entry is exactly zero.
    pub fn is_lower_triangular(&self) -> bool {
        (0..self.rows).all(|r| self.row(r).iter().skip(r + 1).all(|v| v.is_zero()))
    }

    /// Zeroes the strict upper triangle in place.
    pub fn mask_upper(&mut self) {
        for r in 0..self.rows {
            for v in self.row_mut(r).iter_mut().skip(r + 1) {
                *v = T::zero();
            }
        }
    }

    fn check_same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dims(
                op,
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Standard matrix product `a · b`.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::dims(
            "matmul",
            format!("lhs cols == rhs rows ({})", a.cols),
            b.rows,
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik.is_zero() {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Per-row mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowStat<T> {
    pub mean: T,
    /// Population standard deviation.
    pub std: T,
}

/// Mean and population standard deviation of every row.
pub fn row_stats<T: Scalar>(m: &Matrix<T>) -> Vec<RowStat<T>> {
    let n = T::of(m.cols() as f64);
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            RowStat {
                mean,
                std: var.sqrt(),
            }
        })
        .collect()
}

/// Corner-aligned bilinear resampling.
///
/// Output sample `(i, j)` reads the source at
/// `(i·(rows−1)/(out_rows−1), j·(cols−1)/(out_cols−1))`, so the four corners
/// of input and output coincide.
pub fn resize_bilinear<T: Scalar>(m: &Matrix<T>, out_rows: usize, out_cols: usize) -> Matrix<T> {
    assert!(out_rows >= 1 && out_cols >= 1, "resize target must be non-empty");
    if m.shape() == (out_rows, out_cols) {
        return m.clone();
    }
    let ys: Vec<(usize, usize, T)> = sample_axis(m.rows(), out_rows);
    let xs: Vec<(usize, usize, T)> = sample_axis(m.cols(), out_cols);
    Matrix::from_fn(out_rows, out_cols, |i, j| {
        let (y0, y1, fy) = ys[i];
        let (x0, x1, fx) = xs[j];
        let top = lerp(m[(y0, x0)], m[(y0, x1)], fx);
        let bottom = lerp(m[(y1, x0)], m[(y1, x1)], fx);
        lerp(top, bottom, fy)
    })
}

fn sample_axis<T: Scalar>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    (0..dst)
        .map(|i| {
            if dst == 1 || src == 1 {
                return (0, 0, T::zero());
            }
            let pos = (i * (src - 1)) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, T::of(pos - lo as f64))
        })
        .collect()
}

/// `a + (b − a)·t`, clamped to the segment so equal endpoints stay exact.
#[inline]
fn lerp<T: Scalar>(a: T, b: T, t: T) -> T {
    let v = a + (b - a) * t;
    v.max(a.min(b)).min(a.max(b))
}
