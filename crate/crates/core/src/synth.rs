// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic attention traces for controlled similarity experiments.
//!
//! Every text owns a set of base logits, one `L x L` block per (layer, head).
//! A model built with [`Coupling::Shared`] perturbs those base logits with
//! its own Gaussian noise before the row softmax, so two shared models see
//! related attention for the same text. [`Coupling::Independent`] draws
//! fresh base logits per model, which leaves nothing in common across
//! models beyond the generator's statistics.
//!
//! A [`TagSignal`] plants a token-level tagging task into the shared base:
//! token `t` with tag `k` gets extra logit mass on anchor column `k`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::probe::{Annotation, LabelRecord, Task};
use crate::rng::stage_rng;
use crate::trace::{Architecture, AttentionTrace, LayerProjections};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    /// Inclusive sequence length range; each text draws its own length.
    pub min_len: usize,
    pub max_len: usize,
    pub causal: bool,
    /// Standard deviation of the base logits.
    pub logit_scale: f64,
    /// Standard deviation of a shared model's logit noise at the first layer.
    pub noise: f64,
    /// Layer `l` (0-based) uses noise `noise · (1 + growth)^l`.
    pub noise_growth: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 2,
            min_len: 12,
            max_len: 24,
            causal: false,
            logit_scale: 2.0,
            noise: 0.05,
            noise_growth: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 {
            return Err(Error::Config("synthetic traces need at least one layer and head".into()));
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return Err(Error::Config(format!("bad length range {}..={}", self.min_len, self.max_len)));
        }
        let finite = [self.logit_scale, self.noise, self.noise_growth];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("logit scale, noise and growth must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    /// Shared base logits plus per-model noise.
    Shared,
    /// Per-model base logits; no cross-model relation.
    Independent,
}

/// A planted tagging task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TagSignal {
    pub num_tags: usize,
    /// Logit added at the anchor column of a token's tag.
    pub strength: f64,
}

/// Anchor column of tag `k`: tags are spread evenly over the first half
/// of the sequence.
pub fn anchor_column(tag: usize, num_tags: usize, len: usize) -> usize {
    if num_tags <= 1 {
        return 0;
    }
    tag * (len / 2).max(num_tags - 1) / (num_tags - 1)
}

/// Text ids `t0000`, `t0001`, … .
pub fn text_id(index: usize) -> String {
    format!("t{index:04}")
}

/// Deterministic length of a text.
pub fn text_len(config: &SynthConfig, seed: u64, text: &str) -> usize {
    stage_rng(seed, &format!("synth/len/{text}")).random_range(config.min_len..=config.max_len)
}

/// Deterministic tags of a text, uniform over `num_tags`.
pub fn text_tags(seed: u64, text: &str, len: usize, num_tags: usize) -> Vec<usize> {
    let mut rng = stage_rng(seed, &format!("synth/tags/{text}"));
    (0..len).map(|_| rng.random_range(0..num_tags)).collect()
}

/// One synthetic trace.
pub fn synth_trace(
    config: &SynthConfig,
    seed: u64,
    model_id: &str,
    text: &str,
    coupling: Coupling,
    signal: Option<TagSignal>,
) -> Result<AttentionTrace> {
    config.validate()?;
    let (n, h) = (config.num_layers, config.num_heads);
    let l = text_len(config, seed, text);
    let base_stage = match coupling {
        Coupling::Shared => format!("synth/base/{text}"),
        Coupling::Independent => format!("synth/base/{model_id}/{text}"),
    };
    let mut base = stage_rng(seed, &base_stage);
    let mut noise = stage_rng(seed, &format!("synth/noise/{model_id}/{text}"));
    let planted = match (coupling, signal) {
        (Coupling::Shared, Some(s)) if s.num_tags > 0 => {
            let tags = text_tags(seed, text, l, s.num_tags);
            Some((tags, s))
        }
        _ => None,
    };

    let mut attention = Vec::with_capacity(n * h * l * l);
    let mut row = vec![0.0f64; l];
    for layer in 0..n {
        let sigma = match coupling {
            Coupling::Shared => config.noise * (1.0 + config.noise_growth).powi(layer as i32),
            Coupling::Independent => 0.0,
        };
        for _head in 0..h {
            for i in 0..l {
                for (j, z) in row.iter_mut().enumerate() {
                    let b: f64 = base.sample(StandardNormal);
                    let e: f64 = noise.sample(StandardNormal);
                    *z = config.logit_scale * b + sigma * e;
                    if let Some((tags, s)) = &planted {
                        if j == anchor_column(tags[i], s.num_tags, l) {
                            *z += s.strength;
                        }
                    }
                }
                let visible = if config.causal { i + 1 } else { l };
                let m = row[..visible].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = row[..visible].iter().map(|z| (z - m).exp()).sum();
                for (j, z) in row.iter().enumerate() {
                    let p = if j < visible { (z - m).exp() / total } else { 0.0 };
                    attention.push(p as f32);
                }
            }
        }
    }
    Ok(AttentionTrace::new(model_id, text, config.causal, n, h, l, attention))
}

/// Traces for texts `0..num_texts` of one model.
pub fn synth_corpus(
    config: &SynthConfig,
    seed: u64,
    model_id: &str,
    num_texts: usize,
    coupling: Coupling,
    signal: Option<TagSignal>,
) -> Result<Vec<AttentionTrace>> {
    (0..num_texts)
        .map(|i| synth_trace(config, seed, model_id, &text_id(i), coupling, signal))
        .collect()
}

/// POS-style label records for the planted tags, tag `k` named `T<k>`.
pub fn synth_tag_labels(config: &SynthConfig, seed: u64, num_texts: usize, num_tags: usize) -> Vec<LabelRecord> {
    (0..num_texts)
        .map(|i| {
            let text = text_id(i);
            let len = text_len(config, seed, &text);
            LabelRecord {
                annotation: Annotation::Tags(
                    text_tags(seed, &text, len, num_tags).into_iter().map(|k| format!("T{k}")).collect(),
                ),
                text_id: text,
                task: Task::Pos,
            }
        })
        .collect()
}

/// Adds random layer inputs and attention-block weights so the trace can
/// feed the norm-based contribution maps. Weights are scaled by the inverse
/// square root of their fan-in; `γ` entries sit near 1 for Llama/Qwen and
/// near 0 for Gemma, which stores the offset from 1.
pub fn attach_projections(
    trace: &mut AttentionTrace,
    hidden_dim: usize,
    head_dim: usize,
    architecture: Architecture,
    seed: u64,
) -> Result<()> {
    if hidden_dim == 0 || head_dim == 0 {
        return Err(Error::Config("projection sizes must be positive".into()));
    }
    let (n, h, l) = (trace.num_layers(), trace.num_heads(), trace.seq_len());
    let mut rng = stage_rng(
        seed,
        &format!("synth/proj/{}/{}", trace.header.model_id, trace.header.text_id),
    );
    let mut draw = |count: usize, scale: f64, offset: f64| -> Vec<f32> {
        (0..count)
            .map(|_| (offset + scale * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect()
    };
    let features = draw(n * l * hidden_dim, 1.0, 0.0);
    let gamma_offset = match architecture {
        Architecture::LlamaQwen => 1.0,
        Architecture::Gemma => 0.0,
    };
    let projections = (0..n)
        .map(|_| LayerProjections {
            wv: draw(hidden_dim * h * head_dim, (hidden_dim as f64).sqrt().recip(), 0.0),
            wo: draw(h * head_dim * hidden_dim, ((h * head_dim) as f64).sqrt().recip(), 0.0),
            gamma: draw(hidden_dim, 0.1, gamma_offset),
            gamma2: match architecture {
                Architecture::Gemma => Some(draw(hidden_dim, 0.1, 0.0)),
                Architecture::LlamaQwen => None,
            },
        })
        .collect();
    let header = &mut trace.header;
    header.hidden_dim = hidden_dim;
    header.head_dim = head_dim;
    header.has_features = true;
    header.has_projections = true;
    header.architecture = Some(architecture);
    trace.features = Some(features);
    trace.projections = Some(projections);
    Ok(())
}
