// SPDX-License-Identifier: MIT OR Apache-2.0

//! Map preprocessing: per-row outlier suppression, row normalization,
//! resizing to a common grid and causal masking, then channel stacking and
//! training-time augmentation.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::container::{f64_bytes, read_f64s, Container};
use crate::error::{Error, Result};
use crate::linalg::{resize_bilinear, row_stats, Matrix};
use crate::ola::{decompose, head_average, OlaMap, Order};
use crate::rng::stage_rng;
use crate::scalar::Scalar;
use crate::trace::AttentionTrace;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessConfig {
    /// Entries above `row mean + outlier_k · row std` are zeroed.
    pub outlier_k: f64,
    pub target_size: usize,
    pub causal: bool,
    pub renormalize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            outlier_k: 3.0,
            target_size: 50,
            causal: false,
            renormalize: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outlier_k.is_nan() || self.outlier_k <= 0.0 {
            return Err(Error::Config(format!("outlier_k must be positive, got {}", self.outlier_k)));
        }
        if self.target_size < 2 {
            return Err(Error::Config(format!("target_size must be at least 2, got {}", self.target_size)));
        }
        Ok(())
    }
}

/// Preprocessed maps of one text, stacked as channels.
#[derive(Debug, Clone, PartialEq)]
pub struct OlaStack<T> {
    pub channels: Vec<Matrix<T>>,
    pub channel_orders: Vec<Order>,
    pub model_id: String,
    pub text_id: String,
    pub causal: bool,
    /// Token count of the maps before resizing.
    pub source_len: usize,
}

impl<T: Scalar> OlaStack<T> {
    /// Side length of every channel.
    pub fn size(&self) -> usize {
        self.channels.first().map_or(0, Matrix::rows)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub gaussian_sigma: f64,
    /// Temperature `τ` is drawn uniformly from this closed range.
    pub temperature_range: (f64, f64),
    pub highlight_probability: f64,
    pub highlight_gain: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            gaussian_sigma: 0.01,
            temperature_range: (0.8, 1.25),
            highlight_probability: 0.1,
            highlight_gain: 2.0,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Leaves every stack unchanged.
    pub fn identity(seed: u64) -> Self {
        Self {
            gaussian_sigma: 0.0,
            temperature_range: (1.0, 1.0),
            highlight_probability: 0.0,
            highlight_gain: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.temperature_range;
        let ok = self.gaussian_sigma >= 0.0
            && lo > 0.0
            && lo <= hi
            && hi.is_finite()
            && (0.0..=1.0).contains(&self.highlight_probability)
            && self.highlight_gain >= 0.0
            && self.highlight_gain.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation config {self:?}")))
        }
    }
}

/// Zeroes entries strictly greater than `row mean + k · row std`.
pub fn mask_outliers<T: Scalar>(m: &Matrix<T>, k: f64) -> Matrix<T> {
    let k = T::of(k);
    let mut out = m.clone();
    for (r, stat) in row_stats(m).into_iter().enumerate() {
        let threshold = stat.mean + k * stat.std;
        for v in out.row_mut(r) {
            if *v > threshold {
                *v = T::zero();
            }
        }
    }
    out
}

/// Divides each row by its sum; rows summing to zero become uniform.
pub fn row_normalize<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    let uniform = T::one() / T::of(m.cols() as f64);
    for r in 0..out.rows() {
        normalize_slice(out.row_mut(r), uniform);
    }
    out
}

fn normalize_slice<T: Scalar>(row: &mut [T], uniform: T) {
    let s: T = row.iter().copied().sum();
    if s > T::zero() {
        row.iter_mut().for_each(|v| *v /= s);
    } else {
        row.fill(uniform);
    }
}

/// Runs the preprocessing pipeline on each map and stacks the results in
/// ascending order.
pub fn make_stack<T: Scalar>(maps: &[OlaMap<T>], config: &PreprocessConfig) -> Result<OlaStack<T>> {
    config.validate()?;
    let first = maps.first().ok_or(Error::Empty("map list"))?;
    if let Some(other) = maps
        .iter()
        .find(|m| m.model_id != first.model_id || m.text_id != first.text_id)
    {
        return Err(Error::MixedIds(format!(
            "({}, {}) and ({}, {})",
            first.model_id, first.text_id, other.model_id, other.text_id
        )));
    }
    if let Some(bad) = maps.iter().find(|m| m.matrix.shape() != first.matrix.shape() || !m.matrix.is_square()) {
        return Err(Error::dims(
            "make_stack",
            format!("square maps shaped like {:?}", first.matrix.shape()),
            format!("{:?}", bad.matrix.shape()),
        ));
    }
    let mut sorted: Vec<&OlaMap<T>> = maps.iter().collect();
    sorted.sort_by_key(|m| m.order);
    let channels = sorted
        .iter()
        .map(|m| preprocess_map(&m.matrix, config))
        .collect();
    Ok(OlaStack {
        channels,
        channel_orders: sorted.iter().map(|m| m.order).collect(),
        model_id: first.model_id.clone(),
        text_id: first.text_id.clone(),
        causal: config.causal,
        source_len: first.matrix.rows(),
    })
}

/// Decomposes a trace and stacks the requested orders. The causal mask is
/// applied when either the config or the trace asks for it.
pub fn trace_stack<T: Scalar>(trace: &AttentionTrace, orders: &[Order], config: &PreprocessConfig) -> Result<OlaStack<T>> {
    let layers = head_average::<T>(trace);
    let maps = decompose(&layers, orders, &trace.header.model_id, &trace.header.text_id)?;
    let cfg = PreprocessConfig {
        causal: config.causal || trace.header.causal,
        ..*config
    };
    make_stack(&maps, &cfg)
}

/// Single-map pipeline: outlier mask, row normalization, resize, causal mask.
pub fn preprocess_map<T: Scalar>(m: &Matrix<T>, config: &PreprocessConfig) -> Matrix<T> {
    let masked = mask_outliers(m, config.outlier_k);
    let normed = if config.renormalize { row_normalize(&masked) } else { masked };
    let mut out = resize_bilinear(&normed, config.target_size, config.target_size);
    if config.causal {
        out.mask_upper();
    }
    out
}

/// Noise, temperature and highlighting perturbations, deterministic in
/// `(stack, config)`. The random stream is keyed by the stack's ids.
///
/// 1. add `N(0, σ²)` noise and clamp at zero;
/// 2. raise entries to `1/τ`, `τ ~ U(temperature_range)` per channel;
/// 3. renormalize rows if either step changed anything;
/// 4. per row with the highlight probability, multiply one uniformly chosen
///    entry by the gain and renormalize that row.
///
/// Causal stacks are re-masked at the end.
pub fn augment<T: Scalar>(stack: &OlaStack<T>, config: &AugmentConfig) -> Result<OlaStack<T>> {
    config.validate()?;
    let mut rng = stage_rng(config.seed, &format!("augment/{}/{}", stack.model_id, stack.text_id));
    let noise = (config.gaussian_sigma > 0.0)
        .then(|| Normal::new(0.0, config.gaussian_sigma).expect("sigma validated"));
    let (lo, hi) = config.temperature_range;
    let mut out = stack.clone();
    for ch in &mut out.channels {
        let cols = ch.cols();
        let uniform = T::one() / T::of(cols as f64);
        if let Some(dist) = &noise {
            for v in ch.as_mut_slice() {
                *v = (*v + T::of(dist.sample(&mut rng))).max(T::zero());
            }
        }
        let tau = if lo < hi { rng.random_range(lo..=hi) } else { lo };
        if tau != 1.0 {
            let exponent = T::of(1.0 / tau);
            for v in ch.as_mut_slice() {
                *v = v.powf(exponent);
            }
        }
        if noise.is_some() || tau != 1.0 {
            for r in 0..ch.rows() {
                normalize_slice(ch.row_mut(r), uniform);
            }
        }
        if config.highlight_probability > 0.0 {
            for r in 0..ch.rows() {
                if rng.random::<f64>() < config.highlight_probability {
                    let c = rng.random_range(0..cols);
                    let row = ch.row_mut(r);
                    row[c] *= T::of(config.highlight_gain);
                    normalize_slice(row, uniform);
                }
            }
        }
        if out.causal {
            ch.mask_upper();
        }
    }
    Ok(out)
}

/// Encodes a stack as an OLAT container (section `stack`, 64-bit values).
pub fn stack_container<T: Scalar>(stack: &OlaStack<T>) -> Container {
    let mut c = Container::new();
    c.set("kind", "stack");
    c.set("dtype", "f64");
    c.set("model_id", &stack.model_id);
    c.set("text_id", &stack.text_id);
    c.set("causal", stack.causal);
    c.set("source_len", stack.source_len);
    c.set("size", stack.size());
    c.set(
        "channel_orders",
        stack.channel_orders.iter().map(Order::to_string).collect::<Vec<_>>().join(","),
    );
    let values: Vec<f64> = stack
        .channels
        .iter()
        .flat_map(|ch| ch.as_slice().iter().map(|v| v.as_f64()))
        .collect();
    c.add_section("stack", f64_bytes(&values));
    c
}

pub fn stack_from_container<T: Scalar>(c: &Container) -> Result<OlaStack<T>> {
    if c.get("kind") != Some("stack") {
        return Err(Error::format(16, "not a stack container"));
    }
    let size: usize = c.parse("size")?;
    let channel_orders = c
        .require("channel_orders")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Order>>>()?;
    let values = read_f64s("stack", c.require_section("stack")?)?;
    let per = size * size;
    if values.len() != per * channel_orders.len() {
        return Err(Error::format(16, format!(
            "stack section holds {} values, expected {}",
            values.len(),
            per * channel_orders.len()
        )));
    }
    let channels = values
        .chunks_exact(per.max(1))
        .map(|chunk| Matrix::from_vec(size, size, chunk.iter().map(|&v| T::of(v)).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(OlaStack {
        channels,
        channel_orders,
        model_id: c.require("model_id")?.to_owned(),
        text_id: c.require("text_id")?.to_owned(),
        causal: c.parse_bool("causal")?,
        source_len: c.parse("source_len")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(order: usize, m: Matrix<f64>) -> OlaMap<f64> {
        OlaMap {
            order: Order::Level(order),
            matrix: m,
            model_id: "m".into(),
            text_id: "t".into(),
        }
    }

    fn wavy(n: usize) -> Matrix<f64> {
        row_normalize(&Matrix::from_fn(n, n, |r, c| 1.0 + ((r * 5 + c * 3) % 7) as f64))
    }

    #[test]
    fn constant_row_unchanged() {
        let m = Matrix::filled(2, 6, 0.3f64);
        assert_eq!(mask_outliers(&m, 3.0), m);
    }

    #[test]
    fn spike_is_masked() {
        let mut row = vec![0.001f64; 99];
        row.push(0.901);
        let m = Matrix::from_vec(1, 100, row).unwrap();
        let stat = row_stats(&m)[0];
        let threshold = stat.mean + 3.0 * stat.std;
        assert!((threshold - 0.2787).abs() < 1e-3, "{threshold}");
        let out = mask_outliers(&m, 3.0);
        assert_eq!(out[(0, 99)], 0.0);
        assert_eq!(out[(0, 0)], 0.001);
    }

    #[test]
    fn short_row_survives() {
        let m = Matrix::from_rows(&[[0.0f64, 0.0, 0.0, 1.0]]).unwrap();
        // mean 0.25, std sqrt(3)/4, threshold ≈ 1.549
        assert_eq!(mask_outliers(&m, 3.0), m);
    }

    #[test]
    fn threshold_is_strict() {
        // Row [0, 2]: mean 1, std 1, so k = 1 puts the threshold exactly at 2.
        let m = Matrix::from_rows(&[[0.0f64, 2.0]]).unwrap();
        assert_eq!(mask_outliers(&m, 1.0), m);
    }

    #[test]
    fn normalize_rows() {
        let m = Matrix::from_rows(&[[2.0f64, 2.0], [1.0, 3.0]]).unwrap();
        assert_eq!(row_normalize(&m), Matrix::from_rows(&[[0.5, 0.5], [0.25, 0.75]]).unwrap());
        let z = row_normalize(&Matrix::<f64>::zeros(1, 4));
        assert_eq!(z.row(0), &[0.25; 4]);
    }

    #[test]
    fn resize_noop_at_target_size() {
        let m = wavy(50);
        let cfg = PreprocessConfig::default();
        let stack = make_stack(&[map(1, m.clone())], &cfg).unwrap();
        assert_eq!(stack.channels[0], row_normalize(&mask_outliers(&m, 3.0)));
    }

    #[test]
    fn causal_output_is_lower_triangular() {
        let mut m = wavy(13);
        m.mask_upper();
        let cfg = PreprocessConfig {
            causal: true,
            ..Default::default()
        };
        let stack = make_stack(&[map(2, m.clone()), map(1, m)], &cfg).unwrap();
        assert_eq!(stack.channel_orders, vec![Order::Level(1), Order::Level(2)]);
        for ch in &stack.channels {
            assert!(ch.is_lower_triangular());
            assert_eq!(ch.shape(), (50, 50));
        }
    }

    #[test]
    fn identity_map_keeps_diagonal_dominant() {
        let cfg = PreprocessConfig {
            causal: true,
            ..Default::default()
        };
        let stack = make_stack(&[map(0, Matrix::identity(17))], &cfg).unwrap();
        let ch = &stack.channels[0];
        for r in 0..50 {
            let max = ch.row(r).iter().copied().fold(0.0, f64::max);
            assert_eq!(ch[(r, r)], max, "row {r}");
        }
    }

    #[test]
    fn mixed_ids_rejected() {
        let mut other = map(2, wavy(4));
        other.text_id = "u".into();
        let err = make_stack(&[map(1, wavy(4)), other], &PreprocessConfig::default());
        assert!(matches!(err, Err(Error::MixedIds(_))));
    }

    fn stack() -> OlaStack<f64> {
        make_stack(&[map(1, wavy(20)), map(2, wavy(20).transpose())], &PreprocessConfig::default()).unwrap()
    }

    #[test]
    fn identity_augmentation() {
        let s = stack();
        assert_eq!(augment(&s, &AugmentConfig::identity(3)).unwrap(), s);
    }

    #[test]
    fn augmentation_is_seeded() {
        let s = stack();
        let cfg = AugmentConfig {
            seed: 11,
            ..Default::default()
        };
        let a = augment(&s, &cfg).unwrap();
        assert_eq!(a, augment(&s, &cfg).unwrap());
        assert_ne!(a, s);
        let b = augment(&s, &AugmentConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn augmentation_without_noise_stays_in_unit_interval() {
        let s = stack();
        let cfg = AugmentConfig {
            gaussian_sigma: 0.0,
            highlight_probability: 1.0,
            highlight_gain: 50.0,
            temperature_range: (0.3, 3.0),
            seed: 5,
        };
        let a = augment(&s, &cfg).unwrap();
        assert!(a.channels.iter().flat_map(|c| c.as_slice()).all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn stack_container_round_trip() {
        let s = stack();
        let c = Container::from_bytes(&stack_container(&s).to_bytes()).unwrap();
        assert_eq!(stack_from_container::<f64>(&c).unwrap(), s);
    }
}
