// SPDX-License-Identifier: MIT OR Apache-2.0

//! Order-level attention toolkit.
//!
//! Reads attention traces exported from transformer checkpoints, decomposes
//! attention rollout into order-level maps, measures cross-model similarity
//! of those maps with SSIM retrieval, computes norm-based contribution
//! baselines, and trains small probes on stacked maps that transfer across
//! models without retraining.
//!
//! The numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the 64-bit precision used throughout the pipeline.

pub mod container;
pub mod error;
pub mod linalg;
pub mod mapfile;
pub mod norm;
pub mod ola;
pub mod preprocess;
pub mod probe;
pub mod render;
pub mod rng;
pub mod scalar;
pub mod similarity;
pub mod ssim;
pub mod synth;
pub mod trace;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = linalg::Matrix<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
pub type LayerAttention = ola::LayerAttention<f64>;
pub type OlaMap = ola::OlaMap<f64>;
pub type OlaStack = preprocess::OlaStack<f64>;
pub type ContributionMap = norm::ContributionMap<f64>;
pub type LayerDecompInputs = norm::LayerDecompInputs<f64>;
pub type ProbeParams = probe::ProbeParams<f64>;
pub type LabeledExample = probe::LabeledExample<f64>;
