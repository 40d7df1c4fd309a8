// SPDX-License-Identifier: MIT OR Apache-2.0

//! Probe tasks, token alignment onto the resized grid, and label files.
//!
//! Label files are UTF-8, one text per line, tab separated:
//!
//! ```text
//! <text_id>\t<task>\t<payload>
//! ```
//!
//! | task  | payload                                                        |
//! |-------|----------------------------------------------------------------|
//! | `pos` | one tag per token, space separated                             |
//! | `ner` | one BIO tag per token, space separated                         |
//! | `dp`  | `head:label` per token; heads 1-based, `0` marks the root      |
//! | `re`  | `s1:e1 s2:e2 relation`, half-open 0-based token spans          |
//!
//! Blank lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::preprocess::OlaStack;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    /// Relation classification between two entity spans.
    Re,
    /// Named entities as BIO tags.
    Ner,
    /// Dependency heads and relation labels.
    Dp,
    /// Part-of-speech tags.
    Pos,
}

impl Task {
    pub fn is_tagging(self) -> bool {
        matches!(self, Task::Ner | Task::Pos)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Re => "re",
            Task::Ner => "ner",
            Task::Dp => "dp",
            Task::Pos => "pos",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "re" => Ok(Task::Re),
            "ner" => Ok(Task::Ner),
            "dp" => Ok(Task::Dp),
            "pos" => Ok(Task::Pos),
            other => Err(Error::Config(format!("unknown task {other:?} (expected re, ner, dp or pos)"))),
        }
    }
}

/// Dependency arc on the resized grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arc {
    pub dependent: usize,
    pub head: usize,
    pub label: usize,
}

/// Gold annotations expressed in resized-grid positions.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// `(position, tag id)` pairs, ascending by position.
    Tags(Vec<(usize, usize)>),
    Relation {
        e1: Vec<usize>,
        e2: Vec<usize>,
        relation: usize,
    },
    Arcs {
        arcs: Vec<Arc>,
        /// Positions that may act as heads, ascending.
        candidates: Vec<usize>,
    },
}

/// Which positions a forward pass must score, without gold labels.
#[derive(Debug, Clone, PartialEq)]
pub enum Query {
    Tokens(Vec<usize>),
    Pair { e1: Vec<usize>, e2: Vec<usize> },
    Arcs { candidates: Vec<usize> },
}

impl Targets {
    pub fn query(&self) -> Query {
        match self {
            Targets::Tags(tags) => Query::Tokens(tags.iter().map(|t| t.0).collect()),
            Targets::Relation { e1, e2, .. } => Query::Pair {
                e1: e1.clone(),
                e2: e2.clone(),
            },
            Targets::Arcs { candidates, .. } => Query::Arcs {
                candidates: candidates.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample<T> {
    pub stack: OlaStack<T>,
    pub task: Task,
    pub targets: Targets,
    /// Token count before alignment.
    pub token_count: usize,
}

/// Grid position of every token: `round(t·(size−1)/(len−1))`. A token whose
/// position was already claimed by an earlier token maps to `None`.
pub fn align_tokens(len: usize, size: usize) -> Vec<Option<usize>> {
    let mut taken = vec![false; size];
    (0..len)
        .map(|t| {
            let pos = grid_position(t, len, size);
            if taken[pos] {
                None
            } else {
                taken[pos] = true;
                Some(pos)
            }
        })
        .collect()
}

/// Unconditional grid position of token `t` (no collision handling).
pub fn grid_position(t: usize, len: usize, size: usize) -> usize {
    if len <= 1 || size <= 1 {
        return 0;
    }
    let pos = (t as f64 * (size - 1) as f64 / (len - 1) as f64).round() as usize;
    pos.min(size - 1)
}

/// Ordered label names with id lookup.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelSet {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl LabelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I: IntoIterator<Item = S>, S: Into<String>>(names: I) -> Self {
        let mut set = Self::new();
        for n in names {
            set.intern(&n.into());
        }
        set
    }

    /// Id of `name`, inserting it if unseen.
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), self.names.len() - 1);
        self.names.len() - 1
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Word-level annotation of one text, before alignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Annotation {
    Tags(Vec<String>),
    /// `(head, label)` per token; heads are 0-based token indices and the
    /// root points at itself.
    Arcs(Vec<(usize, String)>),
    Relation {
        e1: (usize, usize),
        e2: (usize, usize),
        relation: String,
    },
}

impl Annotation {
    pub fn token_count(&self) -> usize {
        match self {
            Annotation::Tags(t) => t.len(),
            Annotation::Arcs(a) => a.len(),
            Annotation::Relation { e1, e2, .. } => e1.1.max(e2.1),
        }
    }

    fn label_names(&self) -> Vec<&str> {
        match self {
            Annotation::Tags(t) => t.iter().map(String::as_str).collect(),
            Annotation::Arcs(a) => a.iter().map(|(_, l)| l.as_str()).collect(),
            Annotation::Relation { relation, .. } => vec![relation.as_str()],
        }
    }
}

/// One parsed label-file line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRecord {
    pub text_id: String,
    pub task: Task,
    pub annotation: Annotation,
}

pub fn parse_label_file(text: &str) -> Result<Vec<LabelRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(n, line)| parse_label_line(line).map_err(|e| Error::Config(format!("label line {}: {e}", n + 1))))
        .collect()
}

fn parse_label_line(line: &str) -> Result<LabelRecord> {
    let mut parts = line.splitn(3, '\t');
    let (Some(text_id), Some(task), Some(payload)) = (parts.next(), parts.next(), parts.next()) else {
        return Err(Error::Config("expected <text_id>\\t<task>\\t<payload>".into()));
    };
    let task: Task = task.parse()?;
    let fields: Vec<&str> = payload.split_whitespace().collect();
    let annotation = match task {
        Task::Pos | Task::Ner => Annotation::Tags(fields.iter().map(|s| s.to_string()).collect()),
        Task::Dp => {
            let arcs = fields
                .iter()
                .enumerate()
                .map(|(i, f)| {
                    let (head, label) = f
                        .split_once(':')
                        .ok_or_else(|| Error::Config(format!("dp entry {f:?} is not head:label")))?;
                    let head: usize = head
                        .parse()
                        .map_err(|_| Error::Config(format!("bad head in {f:?}")))?;
                    if head > fields.len() {
                        return Err(Error::Config(format!("head {head} beyond sentence length {}", fields.len())));
                    }
                    Ok((if head == 0 { i } else { head - 1 }, label.to_owned()))
                })
                .collect::<Result<Vec<_>>>()?;
            Annotation::Arcs(arcs)
        }
        Task::Re => {
            let [s1, s2, rel] = fields[..] else {
                return Err(Error::Config("re payload is `s1:e1 s2:e2 relation`".into()));
            };
            let span = |s: &str| -> Result<(usize, usize)> {
                let bad = || Error::Config(format!("bad span {s:?}"));
                let (a, b) = s.split_once(':').ok_or_else(bad)?;
                let (a, b) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                if a >= b {
                    return Err(bad());
                }
                Ok((a, b))
            };
            Annotation::Relation {
                e1: span(s1)?,
                e2: span(s2)?,
                relation: rel.to_owned(),
            }
        }
    };
    if annotation.token_count() == 0 {
        return Err(Error::Config("empty annotation".into()));
    }
    Ok(LabelRecord {
        text_id: text_id.to_owned(),
        task,
        annotation,
    })
}

/// Adds every label name used by `records` to `labels`.
pub fn collect_labels<'a>(records: impl IntoIterator<Item = &'a LabelRecord>, labels: &mut LabelSet) {
    for r in records {
        for name in r.annotation.label_names() {
            labels.intern(name);
        }
    }
}

/// Projects a word-level annotation onto the stack's resized grid.
pub fn align_example<T: crate::scalar::Scalar>(
    stack: OlaStack<T>,
    task: Task,
    annotation: &Annotation,
    labels: &LabelSet,
) -> Result<LabeledExample<T>> {
    let n = annotation.token_count();
    let len = stack.source_len;
    let size = stack.size();
    if n > len {
        return Err(Error::validation(
            "labels",
            format!("text {:?}: {n} labelled tokens but the map covers {len}", stack.text_id),
        ));
    }
    let lookup = |name: &str| {
        labels
            .id(name)
            .ok_or_else(|| Error::validation("labels", format!("unknown label {name:?}")))
    };
    let aligned = align_tokens(len, size);
    let targets = match (task, annotation) {
        (Task::Pos | Task::Ner, Annotation::Tags(tags)) => Targets::Tags(
            tags.iter()
                .enumerate()
                .filter_map(|(t, tag)| aligned[t].map(|p| lookup(tag).map(|id| (p, id))))
                .collect::<Result<_>>()?,
        ),
        (Task::Dp, Annotation::Arcs(arcs)) => {
            let candidates: Vec<usize> = aligned[..n].iter().flatten().copied().collect();
            let arcs = arcs
                .iter()
                .enumerate()
                .filter_map(|(t, (head, label))| {
                    let dependent = aligned[t]?;
                    Some(lookup(label).map(|label| Arc {
                        dependent,
                        head: grid_position(*head, len, size),
                        label,
                    }))
                })
                .collect::<Result<Vec<_>>>()?;
            // A head whose token lost its grid cell is represented by the
            // token that owns the cell, which is always a candidate.
            Targets::Arcs { arcs, candidates }
        }
        (Task::Re, Annotation::Relation { e1, e2, relation }) => {
            let span = |(a, b): (usize, usize)| {
                let mut v: Vec<usize> = (a..b).map(|t| grid_position(t, len, size)).collect();
                v.dedup();
                v
            };
            Targets::Relation {
                e1: span(*e1),
                e2: span(*e2),
                relation: lookup(relation)?,
            }
        }
        (task, _) => {
            return Err(Error::TaskMismatch {
                params: format!("{task}"),
                requested: "annotation of a different task".into(),
            })
        }
    };
    Ok(LabeledExample {
        stack,
        task,
        targets,
        token_count: n,
    })
}
