// SPDX-License-Identifier: MIT OR Apache-2.0

//! Structural similarity over single-channel maps.
//!
//! Uses a uniform square window with stride 1 and population statistics.
//! Window sums come from summed-area tables so a whole map costs O(rows·cols)
//! regardless of the window size. [`SsimImage`] caches the per-image tables,
//! which lets retrieval compare one query against a large gallery while only
//! computing the cross term per pair.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    /// Side of the square averaging window.
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    /// Lower bound on the dynamic range `R = max(max(a), max(b))`.
    pub range_floor: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 7,
            k1: 0.01,
            k2: 0.03,
            range_floor: 1e-8,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("SSIM window must be at least 1".into()));
        }
        if !(self.k1 > 0.0 && self.k2 > 0.0 && self.range_floor > 0.0) {
            return Err(Error::Config("SSIM constants must be positive".into()));
        }
        Ok(())
    }
}

/// A map with precomputed window statistics.
#[derive(Debug, Clone)]
pub struct SsimImage<T> {
    values: Matrix<T>,
    window: usize,
    max: T,
    /// Window means, `(rows−w+1) x (cols−w+1)`.
    mean: Vec<T>,
    /// Window population variances, same layout as `mean`.
    var: Vec<T>,
}

impl<T: Scalar> SsimImage<T> {
    pub fn new(values: &Matrix<T>, window: usize) -> Result<Self> {
        if values.rows() < window || values.cols() < window || window == 0 {
            return Err(Error::dims(
                "ssim",
                format!("map of at least {window}x{window}"),
                format!("{}x{}", values.rows(), values.cols()),
            ));
        }
        let sums = window_sums(values, window, |v| v);
        let sq = window_sums(values, window, |v| v * v);
        let n = T::of((window * window) as f64);
        let mean: Vec<T> = sums.iter().map(|&s| s / n).collect();
        let var = sq
            .iter()
            .zip(&mean)
            .map(|(&q, &m)| (q / n - m * m).max(T::zero()))
            .collect();
        Ok(Self {
            values: values.clone(),
            window,
            max: values.max_value(),
            mean,
            var,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }
}

/// SSIM between two equally shaped maps.
pub fn ssim<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, config: &SsimConfig) -> Result<T> {
    config.validate()?;
    if a.shape() != b.shape() {
        return Err(Error::dims(
            "ssim",
            format!("{}x{}", a.rows(), a.cols()),
            format!("{}x{}", b.rows(), b.cols()),
        ));
    }
    let pa = SsimImage::new(a, config.window)?;
    let pb = SsimImage::new(b, config.window)?;
    ssim_prepared(&pa, &pb, config)
}

/// SSIM between two prepared maps; must share shape and window.
pub fn ssim_prepared<T: Scalar>(a: &SsimImage<T>, b: &SsimImage<T>, config: &SsimConfig) -> Result<T> {
    if a.shape() != b.shape() || a.window != b.window || a.window != config.window {
        return Err(Error::dims(
            "ssim_prepared",
            format!("{:?} window {}", a.shape(), a.window),
            format!("{:?} window {}", b.shape(), b.window),
        ));
    }
    let range = a.max.max(b.max).max(T::of(config.range_floor));
    let c1 = (T::of(config.k1) * range).powi(2);
    let c2 = (T::of(config.k2) * range).powi(2);
    let two = T::of(2.0);
    let n = T::of((a.window * a.window) as f64);

    let va = a.values.as_slice();
    let vb = b.values.as_slice();
    let cols = a.values.cols();
    let prod = Matrix::from_fn(a.values.rows(), cols, |r, c| va[r * cols + c] * vb[r * cols + c]);
    let cross_sums = window_sums(&prod, a.window, |v| v);

    let mut total = T::zero();
    for (k, &s_ab) in cross_sums.iter().enumerate() {
        let (ma, mb) = (a.mean[k], b.mean[k]);
        let cov = s_ab / n - ma * mb;
        let num = (two * ma * mb + c1) * (two * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (a.var[k] + b.var[k] + c2);
        total += num / den;
    }
    Ok(total / T::of(cross_sums.len() as f64))
}

/// Sums of `f(v)` over every `w x w` window (stride 1), row-major over window
/// origins.
fn window_sums<T: Scalar>(m: &Matrix<T>, w: usize, f: impl Fn(T) -> T) -> Vec<T> {
    let (rows, cols) = m.shape();
    let stride = cols + 1;
    let mut table = vec![T::zero(); (rows + 1) * stride];
    for r in 0..rows {
        let mut acc = T::zero();
        for c in 0..cols {
            acc += f(m[(r, c)]);
            table[(r + 1) * stride + c + 1] = table[r * stride + c + 1] + acc;
        }
    }
    let (out_r, out_c) = (rows + 1 - w, cols + 1 - w);
    let mut out = Vec::with_capacity(out_r * out_c);
    for r in 0..out_r {
        for c in 0..out_c {
            let s = table[(r + w) * stride + c + w] - table[r * stride + c + w]
                - table[(r + w) * stride + c]
                + table[r * stride + c];
            out.push(s);
        }
    }
    out
}
