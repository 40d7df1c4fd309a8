// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cross-model similarity of preprocessed maps: SSIM retrieval with Hits@k,
//! and an SSIM nearest-neighbour classifier that groups maps by source text.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ola::{decompose, head_average, Order};
use crate::preprocess::{make_stack, OlaStack, PreprocessConfig};
use crate::scalar::Scalar;
use crate::ssim::{ssim_prepared, SsimConfig, SsimImage};
use crate::trace::AttentionTrace;

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    /// `k → fraction of queries whose ground truth ranks within the top k`.
    pub hits_at: BTreeMap<usize, f64>,
    /// 1-based rank of each query's ground truth.
    pub per_query_rank: Vec<usize>,
    pub num_queries: usize,
}

impl RetrievalReport {
    pub fn from_ranks(ranks: Vec<usize>, ks: &[usize]) -> Self {
        let m = ranks.len();
        let hits_at = ks
            .iter()
            .map(|&k| {
                let hits = ranks.iter().filter(|&&r| r <= k).count();
                (k, if m == 0 { 0.0 } else { hits as f64 / m as f64 })
            })
            .collect();
        Self {
            hits_at,
            per_query_rank: ranks,
            num_queries: m,
        }
    }

    pub fn hits(&self, k: usize) -> Option<f64> {
        self.hits_at.get(&k).copied()
    }
}

/// Stack prepared for repeated SSIM comparisons.
struct Prepared<T> {
    channels: Vec<SsimImage<T>>,
}

impl<T: Scalar> Prepared<T> {
    fn new(stack: &OlaStack<T>, cfg: &SsimConfig) -> Result<Self> {
        Ok(Self {
            channels: stack
                .channels
                .iter()
                .map(|c| SsimImage::new(c, cfg.window))
                .collect::<Result<_>>()?,
        })
    }

    /// Unweighted mean of per-channel SSIM.
    fn similarity(&self, other: &Self, cfg: &SsimConfig) -> Result<f64> {
        if self.channels.len() != other.channels.len() {
            return Err(Error::dims("stack similarity", self.channels.len(), other.channels.len()));
        }
        let mut total = 0.0;
        for (a, b) in self.channels.iter().zip(&other.channels) {
            total += ssim_prepared(a, b, cfg)?.as_f64();
        }
        Ok(total / self.channels.len() as f64)
    }
}

fn prepare_all<T: Scalar>(stacks: &[OlaStack<T>], cfg: &SsimConfig) -> Result<Vec<Prepared<T>>> {
    stacks.par_iter().map(|s| Prepared::new(s, cfg)).collect()
}

/// Mean channel SSIM between two stacks.
pub fn stack_similarity<T: Scalar>(a: &OlaStack<T>, b: &OlaStack<T>, cfg: &SsimConfig) -> Result<f64> {
    Prepared::new(a, cfg)?.similarity(&Prepared::new(b, cfg)?, cfg)
}

/// Rank of `target` when scores are sorted descending, ties broken by
/// ascending index.
fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < target))
        .count()
}

pub fn retrieve<T: Scalar>(queries: &[OlaStack<T>], gallery: &[OlaStack<T>], ks: &[usize]) -> Result<RetrievalReport> {
    retrieve_with(queries, gallery, ks, &SsimConfig::default())
}

/// Ranks the whole gallery for every query by SSIM and records where the
/// gallery item with the query's text id lands.
pub fn retrieve_with<T: Scalar>(
    queries: &[OlaStack<T>],
    gallery: &[OlaStack<T>],
    ks: &[usize],
    cfg: &SsimConfig,
) -> Result<RetrievalReport> {
    cfg.validate()?;
    if ks.contains(&0) {
        return Err(Error::Config("Hits@k needs k >= 1".into()));
    }
    if gallery.is_empty() {
        return Err(Error::Empty("gallery"));
    }
    let mut by_text: HashMap<&str, usize> = HashMap::new();
    for (i, g) in gallery.iter().enumerate() {
        by_text.entry(g.text_id.as_str()).or_insert(i);
    }
    let truth = queries
        .iter()
        .map(|q| {
            by_text
                .get(q.text_id.as_str())
                .copied()
                .ok_or_else(|| Error::MissingGroundTruth(q.text_id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let gallery_prep = prepare_all(gallery, cfg)?;
    let ranks = queries
        .par_iter()
        .zip(&truth)
        .map(|(q, &gt)| {
            let qp = Prepared::new(q, cfg)?;
            let scores = gallery_prep
                .iter()
                .map(|g| qp.similarity(g, cfg))
                .collect::<Result<Vec<_>>>()?;
            Ok(rank_of(&scores, gt))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalReport::from_ranks(ranks, ks))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    /// `(true label, predicted label, count)`, most frequent first.
    pub confusions: Vec<(usize, usize, usize)>,
}

/// Labels each test stack by majority vote over its `k` most similar
/// training stacks. Vote ties go to the larger summed SSIM, then the smaller
/// label.
pub fn knn_classify<T: Scalar>(
    train: &[(OlaStack<T>, usize)],
    test: &[(OlaStack<T>, usize)],
    k: usize,
) -> Result<ClassificationReport> {
    knn_classify_with(train, test, k, &SsimConfig::default())
}

pub fn knn_classify_with<T: Scalar>(
    train: &[(OlaStack<T>, usize)],
    test: &[(OlaStack<T>, usize)],
    k: usize,
    cfg: &SsimConfig,
) -> Result<ClassificationReport> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let train_stacks: Vec<OlaStack<T>> = train.iter().map(|(s, _)| s.clone()).collect();
    let train_prep = prepare_all(&train_stacks, cfg)?;
    let predictions = test
        .par_iter()
        .map(|(stack, _)| {
            let qp = Prepared::new(stack, cfg)?;
            let mut scored = train_prep
                .iter()
                .enumerate()
                .map(|(i, t)| Ok((qp.similarity(t, cfg)?, i)))
                .collect::<Result<Vec<_>>>()?;
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut votes: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
            for &(score, i) in scored.iter().take(k) {
                let v = votes.entry(train[i].1).or_insert((0, 0.0));
                v.0 += 1;
                v.1 += score;
            }
            let best = votes
                .into_iter()
                .max_by(|a, b| {
                    (a.1 .0)
                        .cmp(&b.1 .0)
                        .then(a.1 .1.total_cmp(&b.1 .1))
                        .then(b.0.cmp(&a.0))
                })
                .expect("k >= 1 and train non-empty");
            Ok(best.0)
        })
        .collect::<Result<Vec<_>>>()?;
    let correct = predictions
        .iter()
        .zip(test)
        .filter(|(p, (_, label))| *p == label)
        .count();
    let mut confusion: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (p, (_, label)) in predictions.iter().zip(test) {
        if p != label {
            *confusion.entry((*label, *p)).or_default() += 1;
        }
    }
    let mut confusions: Vec<_> = confusion.into_iter().map(|((t, p), n)| (t, p, n)).collect();
    confusions.sort_by(|a, b| b.2.cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    confusions.truncate(10);
    Ok(ClassificationReport {
        accuracy: if test.is_empty() { 0.0 } else { correct as f64 / test.len() as f64 },
        predictions,
        confusions,
    })
}

/// One row of a cross-model comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct PairReport {
    pub source_model: String,
    pub target_model: String,
    pub order: Order,
    pub report: RetrievalReport,
}

/// Decomposes every trace, preprocesses each requested order into a
/// single-channel stack and retrieves target-model queries against every
/// source-model gallery, for each ordered model pair (self-pairs included).
pub fn compare_orders(
    traces_by_model: &BTreeMap<String, Vec<AttentionTrace>>,
    orders: &[Order],
    preprocess: &PreprocessConfig,
    ks: &[usize],
) -> Result<Vec<PairReport>> {
    let mut stacks: BTreeMap<String, BTreeMap<Order, Vec<OlaStack<f64>>>> = BTreeMap::new();
    for (model, traces) in traces_by_model {
        let per_trace = traces
            .par_iter()
            .map(|t| {
                let layers = head_average::<f64>(t);
                let maps = decompose(&layers, orders, model, &t.header.text_id)?;
                let cfg = PreprocessConfig {
                    causal: preprocess.causal || t.header.causal,
                    ..*preprocess
                };
                maps.into_iter()
                    .map(|m| Ok((m.order, make_stack(std::slice::from_ref(&m), &cfg)?)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let entry = stacks.entry(model.clone()).or_default();
        for (order, stack) in per_trace.into_iter().flatten() {
            entry.entry(order).or_default().push(stack);
        }
    }
    compare_stacks(&stacks, orders, ks)
}

/// Retrieval over already-built single-order stacks, keyed by model then
/// order.
pub fn compare_stacks(
    stacks: &BTreeMap<String, BTreeMap<Order, Vec<OlaStack<f64>>>>,
    orders: &[Order],
    ks: &[usize],
) -> Result<Vec<PairReport>> {
    let text_set = |model: &str, order: Order| -> BTreeSet<String> {
        stacks[model]
            .get(&order)
            .map(|v| v.iter().map(|s| s.text_id.clone()).collect())
            .unwrap_or_default()
    };
    let models: Vec<&String> = stacks.keys().collect();
    if models.is_empty() {
        return Err(Error::Empty("model set"));
    }
    for &order in orders {
        let reference = text_set(models[0], order);
        for m in &models[1..] {
            let other = text_set(m, order);
            if other != reference {
                let diff: Vec<_> = reference.symmetric_difference(&other).take(5).cloned().collect();
                return Err(Error::TextSetMismatch(format!(
                    "{} vs {} at order {order}: e.g. {diff:?}",
                    models[0], m
                )));
            }
        }
    }
    let mut out = Vec::new();
    for &order in orders {
        for source in &models {
            for target in &models {
                let gallery = &stacks[*source][&order];
                let queries = &stacks[*target][&order];
                out.push(PairReport {
                    source_model: (*source).clone(),
                    target_model: (*target).clone(),
                    order,
                    report: retrieve(queries, gallery, ks)?,
                });
            }
        }
    }
    Ok(out)
}

/// Tab-separated report: one row per (source, target, order) with a
/// `hits@k` column per k and the query count.
pub fn format_report(rows: &[PairReport], ks: &[usize]) -> String {
    let mut out = String::from("source_model\ttarget_model\torder");
    for k in ks {
        let _ = write!(out, "\thits@{k}");
    }
    out.push_str("\tM\n");
    for row in rows {
        let _ = write!(out, "{}\t{}\t{}", row.source_model, row.target_model, row.order);
        for k in ks {
            let _ = write!(out, "\t{:.6}", row.report.hits(*k).unwrap_or(f64::NAN));
        }
        let _ = writeln!(out, "\t{}", row.report.num_queries);
    }
    out
}
