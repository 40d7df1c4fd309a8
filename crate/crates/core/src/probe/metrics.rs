// SPDX-License-Identifier: MIT OR Apache-2.0

use rayon::prelude::*;

use super::data::{LabelSet, LabeledExample, Targets, Task};
use super::model::{predict, Prediction};
use super::params::ProbeParams;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Task scores; only the fields that apply to the task are set.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskMetrics {
    pub task: Task,
    /// Token accuracy (POS, NER) or relation accuracy (RE).
    pub accuracy: Option<f64>,
    /// Entity-level F1 over decoded BIO spans (NER).
    pub f1: Option<f64>,
    pub uas: Option<f64>,
    pub las: Option<f64>,
    /// Number of scored targets: tokens, relations or arcs.
    pub support: usize,
}

impl TaskMetrics {
    /// The headline number of the task: F1 for NER, UAS for DP, accuracy
    /// otherwise.
    pub fn primary(&self) -> f64 {
        match self.task {
            Task::Ner => self.f1,
            Task::Dp => self.uas,
            Task::Pos | Task::Re => self.accuracy,
        }
        .unwrap_or(0.0)
    }
}

/// Entity span `[start, end)` with its type.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub kind: String,
}

/// Decodes BIO tags into spans. `B-X` always opens a span; `I-X` continues
/// an open span of type `X` and otherwise opens one; any other tag closes
/// the open span.
pub fn bio_spans<S: AsRef<str>>(tags: &[S]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    let close = |open: &mut Option<(usize, &str)>, end: usize, spans: &mut Vec<Span>| {
        if let Some((start, kind)) = open.take() {
            spans.push(Span {
                start,
                end,
                kind: kind.to_owned(),
            });
        }
    };
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        if let Some(kind) = tag.strip_prefix("B-") {
            close(&mut open, i, &mut spans);
            open = Some((i, kind));
        } else if let Some(kind) = tag.strip_prefix("I-") {
            if open.is_none_or(|(_, k)| k != kind) {
                close(&mut open, i, &mut spans);
                open = Some((i, kind));
            }
        } else {
            close(&mut open, i, &mut spans);
        }
    }
    close(&mut open, tags.len(), &mut spans);
    spans
}

/// Counts for precision/recall over exact span matches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SpanCounts {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl SpanCounts {
    pub fn compare<S: AsRef<str>>(predicted: &[S], gold: &[S]) -> Self {
        let p = bio_spans(predicted);
        let g = bio_spans(gold);
        Self {
            correct: p.iter().filter(|s| g.contains(s)).count(),
            predicted: p.len(),
            gold: g.len(),
        }
    }

    pub fn add(&mut self, other: SpanCounts) {
        self.correct += other.correct;
        self.predicted += other.predicted;
        self.gold += other.gold;
    }

    /// F1; defined as 1 when there are neither predicted nor gold spans.
    pub fn f1(&self) -> f64 {
        if self.predicted == 0 && self.gold == 0 {
            return 1.0;
        }
        if self.correct == 0 {
            return 0.0;
        }
        let p = self.correct as f64 / self.predicted as f64;
        let r = self.correct as f64 / self.gold as f64;
        2.0 * p * r / (p + r)
    }
}

/// Scores predictions against gold targets.
pub fn score_predictions<'a>(
    task: Task,
    labels: &LabelSet,
    pairs: impl IntoIterator<Item = (&'a Targets, &'a Prediction)>,
) -> Result<TaskMetrics> {
    let (mut hits, mut total, mut labelled_hits) = (0usize, 0usize, 0usize);
    let mut spans = SpanCounts::default();
    let name = |id: usize| labels.name(id).unwrap_or("O");
    for (targets, prediction) in pairs {
        match (targets, prediction) {
            (Targets::Tags(gold), Prediction::Tags(pred)) => {
                if gold.len() != pred.len() {
                    return Err(Error::dims("score_predictions", gold.len(), pred.len()));
                }
                total += gold.len();
                hits += gold.iter().zip(pred).filter(|(g, p)| g == p).count();
                if task == Task::Ner {
                    let g: Vec<&str> = gold.iter().map(|&(_, t)| name(t)).collect();
                    let p: Vec<&str> = pred.iter().map(|&(_, t)| name(t)).collect();
                    spans.add(SpanCounts::compare(&p, &g));
                }
            }
            (Targets::Relation { relation, .. }, Prediction::Relation(p)) => {
                total += 1;
                hits += usize::from(relation == p);
            }
            (Targets::Arcs { arcs, .. }, Prediction::Arcs(pred)) => {
                for gold in arcs {
                    total += 1;
                    let Some(p) = pred.iter().find(|p| p.dependent == gold.dependent) else {
                        continue;
                    };
                    if p.head == gold.head {
                        hits += 1;
                        labelled_hits += usize::from(p.label == gold.label);
                    }
                }
            }
            _ => {
                return Err(Error::TaskMismatch {
                    params: task.to_string(),
                    requested: "prediction of a different task".into(),
                })
            }
        }
    }
    let frac = |n: usize| if total == 0 { 0.0 } else { n as f64 / total as f64 };
    let mut m = TaskMetrics {
        task,
        accuracy: None,
        f1: None,
        uas: None,
        las: None,
        support: total,
    };
    match task {
        Task::Pos | Task::Re => m.accuracy = Some(frac(hits)),
        Task::Ner => {
            m.accuracy = Some(frac(hits));
            m.f1 = Some(spans.f1());
        }
        Task::Dp => {
            m.uas = Some(frac(hits));
            m.las = Some(frac(labelled_hits));
        }
    }
    Ok(m)
}

/// Evaluates a probe on a dataset of the given task.
pub fn eval_probe<T: Scalar>(params: &ProbeParams<T>, dataset: &[LabeledExample<T>], task: Task) -> Result<TaskMetrics> {
    if task != params.task {
        return Err(Error::TaskMismatch {
            params: params.task.to_string(),
            requested: task.to_string(),
        });
    }
    if let Some(bad) = dataset.iter().find(|e| e.task != task) {
        return Err(Error::TaskMismatch {
            params: task.to_string(),
            requested: bad.task.to_string(),
        });
    }
    let predictions = dataset
        .par_iter()
        .map(|e| predict(params, &e.stack, &e.targets.query()))
        .collect::<Result<Vec<_>>>()?;
    score_predictions(task, &params.labels, dataset.iter().map(|e| &e.targets).zip(&predictions))
}

/// Evaluates source-trained parameters on another model's stacks and
/// verifies the parameters were left untouched.
pub fn transfer_eval<T: Scalar>(params: &ProbeParams<T>, target: &[LabeledExample<T>]) -> Result<TaskMetrics> {
    let before = params.checksum();
    let metrics = eval_probe(params, target, params.task)?;
    let after = params.checksum();
    if before != after {
        return Err(Error::Frozen { before, after });
    }
    Ok(metrics)
}
