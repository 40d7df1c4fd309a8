// SPDX-License-Identifier: MIT OR Apache-2.0

//! Grayscale heatmaps as 8-bit single-channel PNG.

use std::io::Write;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ValueMapping {
    #[default]
    Linear,
    /// `ln(1 + v)` before scaling; lifts faint structure next to sinks.
    Log1p,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderConfig {
    /// Output pixels per matrix cell along each axis.
    pub scale: usize,
    pub value_mapping: ValueMapping,
    /// Zero the largest entry of every row before scaling, which hides
    /// attention sinks.
    pub zero_max_row: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            scale: 8,
            value_mapping: ValueMapping::Linear,
            zero_max_row: false,
        }
    }
}

/// Zeroes the first occurrence of each row's maximum.
pub fn zero_row_maxima<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        if let Some(best) = (0..row.len()).reduce(|best, c| if row[c] > row[best] { c } else { best }) {
            row[best] = T::zero();
        }
    }
    out
}

/// Cell intensities before upscaling, row-major.
pub fn intensities<T: Scalar>(m: &Matrix<T>, config: &RenderConfig) -> Result<Vec<u8>> {
    if !m.is_finite() {
        return Err(Error::validation("matrix", "cannot render non-finite values"));
    }
    let mut m = if config.zero_max_row { zero_row_maxima(m) } else { m.clone() };
    if config.value_mapping == ValueMapping::Log1p {
        m = m.map(|v| v.ln_1p());
    }
    let (lo, hi) = (m.min_value().as_f64(), m.max_value().as_f64());
    if hi <= lo {
        return Ok(vec![0; m.rows() * m.cols()]);
    }
    Ok(m
        .as_slice()
        .iter()
        .map(|v| (255.0 * (v.as_f64() - lo) / (hi - lo)).round().clamp(0.0, 255.0) as u8)
        .collect())
}

/// Writes `m` as a grayscale PNG of `rows·scale x cols·scale` pixels.
pub fn render_heatmap<T: Scalar, W: Write>(m: &Matrix<T>, config: &RenderConfig, sink: W) -> Result<()> {
    if config.scale == 0 {
        return Err(Error::Config("render scale must be at least 1".into()));
    }
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Empty("matrix"));
    }
    let cells = intensities(m, config)?;
    let s = config.scale;
    let (w, h) = (m.cols() * s, m.rows() * s);
    let mut pixels = Vec::with_capacity(w * h);
    for r in 0..m.rows() {
        let line: Vec<u8> = cells[r * m.cols()..(r + 1) * m.cols()]
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, s))
            .collect();
        for _ in 0..s {
            pixels.extend_from_slice(&line);
        }
    }
    let width = u32::try_from(w).map_err(|_| Error::Config("image too wide".into()))?;
    let height = u32::try_from(h).map_err(|_| Error::Config("image too tall".into()))?;
    let mut encoder = png::Encoder::new(sink, width, height);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&pixels)?;
    writer.finish()?;
    Ok(())
}
