// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention traces: per-layer, per-head attention for one tokenized text,
//! optionally with layer inputs and the projection weights needed by the
//! norm-based baselines.
//!
//! Traces are stored as OLAT v1 containers with 32-bit little-endian tensors.
//! Section names are `attention` (`[N][H][L][L]`), `features` (`[N][L][d]`)
//! and, per layer `l`, `wv.l` (`[d][H·E]`), `wo.l` (`[H·E][d]`), `gamma.l`
//! and `gamma2.l` (`[d]`).

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::container::{f32_bytes, read_f32s, Container, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Absolute tolerance on attention row sums.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Normalization layout of the attention block, which selects the
/// decomposition used by the norm-based baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// Pre-norm RMSLN with gain `γ` (Llama, Qwen).
    LlamaQwen,
    /// RMSLN before and after attention with gains `1+γ1`, `1+γ2` (Gemma 2).
    Gemma,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::LlamaQwen => "llama_qwen",
            Architecture::Gemma => "gemma",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "llama_qwen" => Ok(Architecture::LlamaQwen),
            "gemma" => Ok(Architecture::Gemma),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceHeader {
    pub format_version: u32,
    pub model_id: String,
    pub text_id: String,
    pub causal: bool,
    pub num_layers: usize,
    pub num_heads: usize,
    pub seq_len: usize,
    /// Hidden size `d`; 0 when neither features nor projections are stored.
    pub hidden_dim: usize,
    /// Per-head value size `E`; 0 without projections.
    pub head_dim: usize,
    pub has_features: bool,
    pub has_projections: bool,
    pub architecture: Option<Architecture>,
    pub tokens: Vec<String>,
}

/// Attention-block weights of one layer. Value and output projections are
/// already expanded to one block per query head.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerProjections {
    /// `[d][H·E]`, head `h` occupies columns `h·E..(h+1)·E`.
    pub wv: Vec<f32>,
    /// `[H·E][d]`, head `h` occupies rows `h·E..(h+1)·E`.
    pub wo: Vec<f32>,
    /// `γ` (or `γ1` for Gemma), length `d`.
    pub gamma: Vec<f32>,
    /// `γ2`, Gemma only.
    pub gamma2: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub header: TraceHeader,
    /// `[N][H][L][L]`, C order.
    pub attention: Vec<f32>,
    /// `[N][L][d]`, the input of each layer's attention block.
    pub features: Option<Vec<f32>>,
    pub projections: Option<Vec<LayerProjections>>,
}

impl AttentionTrace {
    /// Attention-only trace with placeholder token strings.
    pub fn new(
        model_id: impl Into<String>,
        text_id: impl Into<String>,
        causal: bool,
        num_layers: usize,
        num_heads: usize,
        seq_len: usize,
        attention: Vec<f32>,
    ) -> Self {
        Self {
            header: TraceHeader {
                format_version: FORMAT_VERSION,
                model_id: model_id.into(),
                text_id: text_id.into(),
                causal,
                num_layers,
                num_heads,
                seq_len,
                hidden_dim: 0,
                head_dim: 0,
                has_features: false,
                has_projections: false,
                architecture: None,
                tokens: (0..seq_len).map(|i| format!("<{i}>")).collect(),
            },
            attention,
            features: None,
            projections: None,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.header.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.header.num_heads
    }

    pub fn seq_len(&self) -> usize {
        self.header.seq_len
    }

    /// Attention of one head as an `L x L` matrix.
    pub fn attention_matrix<T: Scalar>(&self, layer: usize, head: usize) -> Matrix<T> {
        let l = self.seq_len();
        let start = (layer * self.num_heads() + head) * l * l;
        let data = self.attention[start..start + l * l]
            .iter()
            .map(|&v| T::of(f64::from(v)))
            .collect();
        Matrix::from_vec(l, l, data).expect("shape checked by construction")
    }

    /// Layer input features as an `L x d` matrix.
    pub fn feature_matrix<T: Scalar>(&self, layer: usize) -> Option<Matrix<T>> {
        let features = self.features.as_ref()?;
        let (l, d) = (self.seq_len(), self.header.hidden_dim);
        let start = layer * l * d;
        let data = features.get(start..start + l * d)?.iter().map(|&v| T::of(f64::from(v))).collect();
        Matrix::from_vec(l, d, data).ok()
    }
}

/// One invariant violation.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Every violation found in a trace; empty means valid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            field: field.into(),
            message: message.into(),
        });
    }
}

/// Checks every trace invariant. Shape problems are reported first, then
/// attention violations in (layer, head, row) order, then auxiliary tensors.
pub fn validate_trace(trace: &AttentionTrace) -> ValidationReport {
    let mut report = ValidationReport::default();
    let h = &trace.header;
    if h.num_layers == 0 {
        report.push("num_layers", "must be at least 1");
    }
    if h.num_heads == 0 {
        report.push("num_heads", "must be at least 1");
    }
    if h.seq_len == 0 {
        report.push("seq_len", "must be at least 1");
    }
    if h.tokens.len() != h.seq_len {
        report.push(
            "token_strings",
            format!("{} tokens for seq_len {}", h.tokens.len(), h.seq_len),
        );
    }
    let (n, heads, l) = (h.num_layers, h.num_heads, h.seq_len);
    let expected = n * heads * l * l;
    let attention_ok = trace.attention.len() == expected;
    if !attention_ok {
        report.push(
            "attention",
            format!("{} values, expected {expected} for [{n}][{heads}][{l}][{l}]", trace.attention.len()),
        );
    }
    if h.has_features != trace.features.is_some() {
        report.push("has_features", "flag disagrees with presence of features");
    }
    if h.has_projections != trace.projections.is_some() {
        report.push("has_projections", "flag disagrees with presence of projections");
    }
    if (h.has_features || h.has_projections) && h.hidden_dim == 0 {
        report.push("hidden_dim", "must be positive when features or projections are present");
    }

    if attention_ok && l > 0 {
        for layer in 0..n {
            for head in 0..heads {
                for row in 0..l {
                    let start = ((layer * heads + head) * l + row) * l;
                    check_row(&mut report, &trace.attention[start..start + l], h.causal, (layer, head, row));
                }
            }
        }
    }

    if let Some(features) = &trace.features {
        let want = n * l * h.hidden_dim;
        if features.len() != want {
            report.push("features", format!("{} values, expected {want}", features.len()));
        } else if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            report.push("features", format!("non-finite value at flat index {i}"));
        }
    }
    if let Some(projections) = &trace.projections {
        check_projections(&mut report, h, projections);
    }
    report
}

fn check_row(report: &mut ValidationReport, row: &[f32], causal: bool, (layer, head, r): (usize, usize, usize)) {
    let mut sum = 0.0f64;
    let mut finite = true;
    for (c, &v) in row.iter().enumerate() {
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            report.push(
                "attention",
                format!("entry {v} at ({layer},{head},{r},{c}) outside [0, 1]"),
            );
            finite &= v.is_finite();
        } else if causal && c > r && v != 0.0 {
            report.push("attention", format!("causal violation at ({layer},{head},{r},{c})"));
        }
        sum += f64::from(v);
    }
    if finite && (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
        report.push(
            "attention",
            format!(
                "row sum {} exceeds tolerance at ({layer},{head},{r})",
                sum as f32
            ),
        );
    }
}

fn check_projections(report: &mut ValidationReport, h: &TraceHeader, projections: &[LayerProjections]) {
    let (d, heads, e) = (h.hidden_dim, h.num_heads, h.head_dim);
    if projections.len() != h.num_layers {
        report.push(
            "projections",
            format!("{} layers, expected {}", projections.len(), h.num_layers),
        );
    }
    if e == 0 {
        report.push("head_dim", "must be positive when projections are present");
    }
    let arch = match h.architecture {
        Some(a) => a,
        None => {
            report.push("architecture", "required when projections are present");
            return;
        }
    };
    for (layer, p) in projections.iter().enumerate() {
        let sizes = [
            (format!("wv.{layer}"), p.wv.len(), d * heads * e),
            (format!("wo.{layer}"), p.wo.len(), heads * e * d),
            (format!("gamma.{layer}"), p.gamma.len(), d),
        ];
        for (field, got, want) in sizes {
            if got != want {
                report.push(field, format!("{got} values, expected {want}"));
            }
        }
        match (&p.gamma2, arch) {
            (Some(g2), Architecture::Gemma) if g2.len() != d => {
                report.push(format!("gamma2.{layer}"), format!("{} values, expected {d}", g2.len()))
            }
            (None, Architecture::Gemma) => report.push(format!("gamma2.{layer}"), "required for gemma"),
            (Some(_), Architecture::LlamaQwen) => {
                report.push(format!("gamma2.{layer}"), "only valid for gemma")
            }
            _ => {}
        }
        let all = p.wv.iter().chain(&p.wo).chain(&p.gamma).chain(p.gamma2.iter().flatten());
        if all.clone().any(|v| !v.is_finite()) {
            report.push(format!("projections.{layer}"), "non-finite value");
        }
    }
}

fn first_violation(report: ValidationReport) -> Result<()> {
    match report.violations.into_iter().next() {
        None => Ok(()),
        Some(v) => Err(Error::Validation {
            field: v.field,
            message: v.message,
        }),
    }
}

/// Encodes a trace as an OLAT container after validating it.
pub fn trace_container(trace: &AttentionTrace) -> Result<Container> {
    first_violation(validate_trace(trace))?;
    let h = &trace.header;
    let mut c = Container::new();
    c.set("kind", "trace");
    c.set("model_id", &h.model_id);
    c.set("text_id", &h.text_id);
    c.set("causal", h.causal);
    c.set("num_layers", h.num_layers);
    c.set("num_heads", h.num_heads);
    c.set("seq_len", h.seq_len);
    c.set("hidden_dim", h.hidden_dim);
    c.set("head_dim", h.head_dim);
    c.set("has_features", h.has_features);
    c.set("has_projections", h.has_projections);
    if let Some(arch) = h.architecture {
        c.set("arch", arch);
    }
    for (i, tok) in h.tokens.iter().enumerate() {
        c.set(&format!("token.{i}"), tok);
    }
    c.add_section("attention", f32_bytes(&trace.attention));
    if let Some(f) = &trace.features {
        c.add_section("features", f32_bytes(f));
    }
    if let Some(projections) = &trace.projections {
        for (l, p) in projections.iter().enumerate() {
            c.add_section(&format!("wv.{l}"), f32_bytes(&p.wv));
            c.add_section(&format!("wo.{l}"), f32_bytes(&p.wo));
            c.add_section(&format!("gamma.{l}"), f32_bytes(&p.gamma));
            if let Some(g2) = &p.gamma2 {
                c.add_section(&format!("gamma2.{l}"), f32_bytes(g2));
            }
        }
    }
    Ok(c)
}

pub fn write_trace<W: Write>(trace: &AttentionTrace, sink: W) -> Result<()> {
    trace_container(trace)?.write_to(sink)
}

pub fn read_trace<R: Read>(source: R) -> Result<AttentionTrace> {
    trace_from_container(&Container::read_from(source)?)
}

/// Decodes a trace; the result is validated before being returned.
pub fn trace_from_container(c: &Container) -> Result<AttentionTrace> {
    let trace = decode_trace(c)?;
    first_violation(validate_trace(&trace))?;
    Ok(trace)
}

/// Decodes a trace without checking its invariants, so that a caller can
/// list every violation with [`validate_trace`].
pub fn decode_trace(c: &Container) -> Result<AttentionTrace> {
    if let Some(kind) = c.get("kind") {
        if kind != "trace" {
            return Err(Error::format(16, format!("expected a trace container, found kind {kind:?}")));
        }
    }
    let num_layers: usize = c.parse("num_layers")?;
    let seq_len: usize = c.parse("seq_len")?;
    let has_features = c.parse_bool("has_features")?;
    let has_projections = c.parse_bool("has_projections")?;
    let architecture = c.get("arch").map(str::parse).transpose()?;
    let tokens = (0..seq_len)
        .map(|i| c.require(&format!("token.{i}")).map(str::to_owned))
        .collect::<Result<Vec<_>>>()?;
    let header = TraceHeader {
        format_version: FORMAT_VERSION,
        model_id: c.require("model_id")?.to_owned(),
        text_id: c.require("text_id")?.to_owned(),
        causal: c.parse_bool("causal")?,
        num_layers,
        num_heads: c.parse("num_heads")?,
        seq_len,
        hidden_dim: c.parse("hidden_dim")?,
        head_dim: c.get("head_dim").map_or(Ok(0), |_| c.parse("head_dim"))?,
        has_features,
        has_projections,
        architecture,
        tokens,
    };
    let f32_section = |name: &str| -> Result<Vec<f32>> { read_f32s(name, c.require_section(name)?) };
    let attention = f32_section("attention")?;
    let features = has_features.then(|| f32_section("features")).transpose()?;
    let projections = if has_projections {
        let gemma = architecture == Some(Architecture::Gemma);
        Some(
            (0..num_layers)
                .map(|l| {
                    Ok(LayerProjections {
                        wv: f32_section(&format!("wv.{l}"))?,
                        wo: f32_section(&format!("wo.{l}"))?,
                        gamma: f32_section(&format!("gamma.{l}"))?,
                        gamma2: gemma.then(|| f32_section(&format!("gamma2.{l}"))).transpose()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(AttentionTrace {
        header,
        attention,
        features,
        projections,
    })
}

pub fn read_trace_file(path: impl AsRef<std::path::Path>) -> Result<AttentionTrace> {
    read_trace(std::io::BufReader::new(std::fs::File::open(path)?))
}
