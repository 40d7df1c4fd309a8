// SPDX-License-Identifier: MIT OR Apache-2.0

//! Norm-based token contributions for causal LMs with RMS layer norm.
//!
//! The attention-block output of token `i` splits exactly into one term per
//! context token, `y_i = Σ_j T_i(x_j)`:
//!
//! - Llama/Qwen: `T_i(x_j) = Σ_h A_ij^h · RMSLN(x_j) · Wv^h · Wo^h (+ x_i if i = j)`
//! - Gemma: the same attention sum passed through the second norm, which is
//!   linear once `RMS(x̂_i)` of the full pre-norm output is fixed:
//!   `T_i(x_j) = (1+γ2) ⊙ [Σ_h A_ij^h · RMSLN1(x_j) · Wv^h · Wo^h] / RMS(x̂_i) (+ x_i if i = j)`
//!
//! The contribution map stores `‖T_i(x_j)‖₂`.

use crate::error::{Error, Result};
use crate::linalg::{matmul, Matrix};
use crate::scalar::Scalar;
use crate::trace::AttentionTrace;

pub use crate::trace::Architecture;

/// Everything needed to decompose one layer's attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDecompInputs<T> {
    /// Per-head attention, `H` matrices of `L x L`.
    pub attention: Vec<Matrix<T>>,
    /// Layer inputs, `L x d`.
    pub features: Matrix<T>,
    /// Value projection blocks, `H` matrices of `d x E`.
    pub wv: Vec<Matrix<T>>,
    /// Output projection blocks, `H` matrices of `E x d`.
    pub wo: Vec<Matrix<T>>,
    /// `γ` for Llama/Qwen, `γ1` for Gemma.
    pub gamma: Vec<T>,
    /// `γ2`, Gemma only.
    pub gamma2: Option<Vec<T>>,
    pub architecture: Architecture,
}

impl<T: Scalar> LayerDecompInputs<T> {
    /// Gathers one layer from a trace carrying features and projections.
    pub fn from_trace(trace: &AttentionTrace, layer: usize) -> Result<Self> {
        let h = &trace.header;
        let missing = |what: &str| Error::validation(what, format!("trace {:?} has no {what}", h.text_id));
        let features = trace.feature_matrix(layer).ok_or_else(|| missing("features"))?;
        let p = trace
            .projections
            .as_ref()
            .and_then(|p| p.get(layer))
            .ok_or_else(|| missing("projections"))?;
        let architecture = h.architecture.ok_or_else(|| missing("architecture"))?;
        let (d, heads, e) = (h.hidden_dim, h.num_heads, h.head_dim);
        let cast = |v: &[f32]| v.iter().map(|&x| T::of(f64::from(x))).collect::<Vec<T>>();
        let wv_full = Matrix::from_vec(d, heads * e, cast(&p.wv))?;
        let wo_full = Matrix::from_vec(heads * e, d, cast(&p.wo))?;
        let wv = (0..heads)
            .map(|hd| Matrix::from_fn(d, e, |r, c| wv_full[(r, hd * e + c)]))
            .collect();
        let wo = (0..heads)
            .map(|hd| Matrix::from_fn(e, d, |r, c| wo_full[(hd * e + r, c)]))
            .collect();
        let inputs = Self {
            attention: (0..heads).map(|hd| trace.attention_matrix(layer, hd)).collect(),
            features,
            wv,
            wo,
            gamma: cast(&p.gamma),
            gamma2: p.gamma2.as_deref().map(cast),
            architecture,
        };
        inputs.check()?;
        Ok(inputs)
    }

    fn check(&self) -> Result<()> {
        let (l, d) = self.features.shape();
        let heads = self.attention.len();
        if heads == 0 || self.wv.len() != heads || self.wo.len() != heads {
            return Err(Error::dims(
                "layer_contributions",
                format!("{heads} heads of attention, values and outputs"),
                format!("{} value and {} output blocks", self.wv.len(), self.wo.len()),
            ));
        }
        let e = self.wv[0].cols();
        for hd in 0..heads {
            if self.attention[hd].shape() != (l, l) {
                return Err(Error::dims("layer_contributions", format!("{l}x{l} attention"), format!("{:?}", self.attention[hd].shape())));
            }
            if self.wv[hd].shape() != (d, e) || self.wo[hd].shape() != (e, d) {
                return Err(Error::dims(
                    "layer_contributions",
                    format!("value {d}x{e}, output {e}x{d}"),
                    format!("{:?}, {:?}", self.wv[hd].shape(), self.wo[hd].shape()),
                ));
            }
        }
        if self.gamma.len() != d {
            return Err(Error::dims("layer_contributions", format!("gamma of length {d}"), self.gamma.len()));
        }
        match (self.architecture, &self.gamma2) {
            (Architecture::Gemma, Some(g2)) if g2.len() == d => {}
            (Architecture::Gemma, _) => {
                return Err(Error::dims("layer_contributions", format!("gamma2 of length {d}"), "missing or mis-sized"))
            }
            (Architecture::LlamaQwen, Some(_)) => {
                return Err(Error::validation("gamma2", "only valid for gemma"))
            }
            (Architecture::LlamaQwen, None) => {}
        }
        let all_finite = self.features.is_finite()
            && self.attention.iter().chain(&self.wv).chain(&self.wo).all(Matrix::is_finite)
            && self.gamma.iter().chain(self.gamma2.iter().flatten()).all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::validation("layer inputs", "non-finite value"));
        }
        Ok(())
    }
}

/// Per-token-pair contribution norms of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionMap<T> {
    pub matrix: Matrix<T>,
    pub layer: usize,
    pub model_id: String,
    pub text_id: String,
}

/// Root mean square of a vector.
pub fn rms<T: Scalar>(x: &[T]) -> T {
    (x.iter().map(|&v| v * v).sum::<T>() / T::of(x.len() as f64)).sqrt()
}

/// `g ⊙ x / RMS(x)` with `g = γ` for Llama/Qwen and `g = 1+γ` for Gemma.
pub fn rmsln_scale<T: Scalar>(x: &[T], gamma: &[T], architecture: Architecture) -> Result<Vec<T>> {
    if x.is_empty() || x.len() != gamma.len() {
        return Err(Error::dims("rmsln_scale", format!("gamma of length {}", x.len()), gamma.len()));
    }
    let r = rms(x);
    if r.is_zero() {
        return Err(Error::Singularity("input vector".into()));
    }
    Ok(x.iter()
        .zip(gamma)
        .map(|(&v, &g)| gain(g, architecture) * v / r)
        .collect())
}

#[inline]
fn gain<T: Scalar>(g: T, architecture: Architecture) -> T {
    match architecture {
        Architecture::LlamaQwen => g,
        Architecture::Gemma => T::one() + g,
    }
}

/// Every decomposition term `T_i(x_j)` of one layer, indexed `[i][j]`, each a
/// `d`-vector. Entries with `j > i` under causal attention are zero vectors.
pub fn contribution_terms<T: Scalar>(inputs: &LayerDecompInputs<T>) -> Result<Vec<Vec<Vec<T>>>> {
    inputs.check()?;
    let (l, d) = inputs.features.shape();
    let arch = inputs.architecture;

    // Value-path image of every normalized token under every head: [h] -> L x d.
    let mut normed = Matrix::<T>::zeros(l, d);
    for j in 0..l {
        let row = rmsln_scale(inputs.features.row(j), &inputs.gamma, arch)
            .map_err(|_| Error::Singularity(format!("token {j}")))?;
        normed.row_mut(j).copy_from_slice(&row);
    }
    let per_head: Vec<Matrix<T>> = inputs
        .wv
        .iter()
        .zip(&inputs.wo)
        .map(|(wv, wo)| matmul(&matmul(&normed, wv)?, wo))
        .collect::<Result<_>>()?;

    let mut terms = vec![vec![vec![T::zero(); d]; l]; l];
    for (i, row_terms) in terms.iter_mut().enumerate() {
        for (j, term) in row_terms.iter_mut().enumerate() {
            for (att, img) in inputs.attention.iter().zip(&per_head) {
                let a = att[(i, j)];
                if a.is_zero() {
                    continue;
                }
                for (t, &v) in term.iter_mut().zip(img.row(j)) {
                    *t += a * v;
                }
            }
        }
    }

    if let (Architecture::Gemma, Some(g2)) = (arch, &inputs.gamma2) {
        for (i, row_terms) in terms.iter_mut().enumerate() {
            let mut pre_norm = vec![T::zero(); d];
            for term in row_terms.iter() {
                for (p, &v) in pre_norm.iter_mut().zip(term) {
                    *p += v;
                }
            }
            let r = rms(&pre_norm);
            if r.is_zero() {
                return Err(Error::Singularity(format!("attention output of token {i}")));
            }
            for term in row_terms.iter_mut() {
                for (t, &g) in term.iter_mut().zip(g2) {
                    *t = (T::one() + g) * *t / r;
                }
            }
        }
    }

    for (i, row_terms) in terms.iter_mut().enumerate() {
        for (t, &x) in row_terms[i].iter_mut().zip(inputs.features.row(i)) {
            *t += x;
        }
    }
    Ok(terms)
}

/// `‖T_i(x_j)‖₂` for every token pair of one layer.
pub fn layer_contributions<T: Scalar>(inputs: &LayerDecompInputs<T>) -> Result<Matrix<T>> {
    let terms = contribution_terms(inputs)?;
    let l = terms.len();
    Ok(Matrix::from_fn(l, l, |i, j| {
        terms[i][j].iter().map(|&v| v * v).sum::<T>().sqrt()
    }))
}

/// Contribution maps for every layer of a trace.
pub fn trace_contributions<T: Scalar>(trace: &AttentionTrace) -> Result<Vec<ContributionMap<T>>> {
    (0..trace.num_layers())
        .map(|layer| {
            let inputs = LayerDecompInputs::from_trace(trace, layer)?;
            Ok(ContributionMap {
                matrix: layer_contributions(&inputs)?,
                layer,
                model_id: trace.header.model_id.clone(),
                text_id: trace.header.text_id.clone(),
            })
        })
        .collect()
}

/// Row-normalizes each layer map and chains them, later layers leftmost.
pub fn aggregate_contributions<T: Scalar>(per_layer: &[ContributionMap<T>]) -> Result<ContributionMap<T>> {
    let first = per_layer.first().ok_or(Error::Empty("contribution maps"))?;
    let mut acc: Option<Matrix<T>> = None;
    for map in per_layer {
        if map.matrix.shape() != first.matrix.shape() {
            return Err(Error::dims(
                "aggregate_contributions",
                format!("{:?}", first.matrix.shape()),
                format!("{:?}", map.matrix.shape()),
            ));
        }
        let mut normed = map.matrix.clone();
        for r in 0..normed.rows() {
            let s: T = normed.row(r).iter().copied().sum();
            if s.is_zero() {
                return Err(Error::DegenerateRow { layer: map.layer, row: r });
            }
            normed.row_mut(r).iter_mut().for_each(|v| *v /= s);
        }
        acc = Some(match acc {
            None => normed,
            Some(prev) => matmul(&normed, &prev)?,
        });
    }
    let last = per_layer.last().expect("non-empty");
    Ok(ContributionMap {
        matrix: acc.expect("non-empty"),
        layer: last.layer,
        model_id: first.model_id.clone(),
        text_id: first.text_id.clone(),
    })
}
