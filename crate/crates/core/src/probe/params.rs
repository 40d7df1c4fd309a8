// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::Rng;
use sha2::{Digest, Sha256};

use super::data::{LabelSet, Task};
use crate::container::{f64_bytes, read_f64s, Container};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::ola::Order;
use crate::rng::stage_rng;
use crate::scalar::Scalar;

/// Output layer of a probe.
#[derive(Debug, Clone, PartialEq)]
pub enum Head<T> {
    /// Per-token classifier (POS, NER): `hidden x num_tags` plus bias.
    Tagging { w: Matrix<T>, b: Vec<T> },
    /// Entity-pair classifier (RE): `2·hidden x num_relations` plus bias.
    Pair { w: Matrix<T>, b: Vec<T> },
    /// Biaffine arc scorer and one biaffine form per dependency label, each
    /// `(hidden+1) x (hidden+1)`; the appended constant carries the biases.
    Biaffine { arc: Matrix<T>, labels: Vec<Matrix<T>> },
}

/// Weights of a probe: a shared `tanh` projection and one task head.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParams<T> {
    pub task: Task,
    /// `feature_dim x hidden`.
    pub proj_w: Matrix<T>,
    pub proj_b: Vec<T>,
    pub head: Head<T>,
    /// Output label names (tags, relations or dependency labels).
    pub labels: LabelSet,
    /// Channel layout of the stacks this probe was trained on.
    pub channel_orders: Vec<Order>,
    /// Side length of the stacks this probe was trained on.
    pub size: usize,
}

impl<T: Scalar> ProbeParams<T> {
    /// Glorot-uniform weights and zero biases drawn from the `probe-init`
    /// stream of `seed`.
    pub fn init(
        task: Task,
        labels: LabelSet,
        channel_orders: Vec<Order>,
        size: usize,
        hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        if labels.is_empty() || hidden == 0 || size == 0 || channel_orders.is_empty() {
            return Err(Error::Config("probe needs labels, channels, a grid size and hidden units".into()));
        }
        let mut rng = stage_rng(seed, "probe-init");
        let feature_dim = 2 * channel_orders.len() * size;
        let mut glorot = |rows: usize, cols: usize| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| T::of(rng.random_range(-a..a)))
        };
        let n = labels.len();
        let proj_w = glorot(feature_dim, hidden);
        let head = match task {
            Task::Pos | Task::Ner => Head::Tagging {
                w: glorot(hidden, n),
                b: vec![T::zero(); n],
            },
            Task::Re => Head::Pair {
                w: glorot(2 * hidden, n),
                b: vec![T::zero(); n],
            },
            Task::Dp => Head::Biaffine {
                arc: glorot(hidden + 1, hidden + 1),
                labels: (0..n).map(|_| glorot(hidden + 1, hidden + 1)).collect(),
            },
        };
        Ok(Self {
            task,
            proj_w,
            proj_b: vec![T::zero(); hidden],
            head,
            labels,
            channel_orders,
            size,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.proj_w.rows()
    }

    pub fn hidden(&self) -> usize {
        self.proj_w.cols()
    }

    pub fn num_outputs(&self) -> usize {
        self.labels.len()
    }

    /// Same shapes, all zeros; the gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(|_, block| block.fill(T::zero()));
        z
    }

    /// Visits every parameter block in a fixed order.
    pub fn visit(&self, mut f: impl FnMut(&str, &[T])) {
        f("proj.w", self.proj_w.as_slice());
        f("proj.b", &self.proj_b);
        match &self.head {
            Head::Tagging { w, b } | Head::Pair { w, b } => {
                f("head.w", w.as_slice());
                f("head.b", b);
            }
            Head::Biaffine { arc, labels } => {
                f("head.arc", arc.as_slice());
                for (i, l) in labels.iter().enumerate() {
                    f(&format!("head.label.{i}"), l.as_slice());
                }
            }
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut [T])) {
        f("proj.w", self.proj_w.as_mut_slice());
        f("proj.b", &mut self.proj_b);
        match &mut self.head {
            Head::Tagging { w, b } | Head::Pair { w, b } => {
                f("head.w", w.as_mut_slice());
                f("head.b", b);
            }
            Head::Biaffine { arc, labels } => {
                f("head.arc", arc.as_mut_slice());
                for (i, l) in labels.iter_mut().enumerate() {
                    f(&format!("head.label.{i}"), l.as_mut_slice());
                }
            }
        }
    }

    /// All parameters flattened in visiting order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit(|_, b| out.extend_from_slice(b));
        out
    }

    /// `self += scale · other`; shapes must agree.
    pub fn axpy(&mut self, scale: T, other: &Self) {
        let flat = other.flatten();
        let mut offset = 0;
        self.visit_mut(|_, block| {
            for (v, &g) in block.iter_mut().zip(&flat[offset..]) {
                *v += scale * g;
            }
            offset += block.len();
        });
        debug_assert_eq!(offset, flat.len());
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    /// SHA-256 over task, labels, layout and every parameter value as f64.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(format!("{}|{}|{}|", self.task, self.size, self.hidden()).as_bytes());
        for name in self.labels.names() {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
        }
        for o in &self.channel_orders {
            hasher.update(o.to_string().as_bytes());
            hasher.update([0u8]);
        }
        self.visit(|name, block| {
            hasher.update(name.as_bytes());
            for v in block {
                hasher.update(v.as_f64().to_le_bytes());
            }
        });
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Encodes parameters as an OLAT container with sections `proj`,
/// `head.<task>` and `meta` (newline-separated label names).
pub fn params_container<T: Scalar>(params: &ProbeParams<T>) -> Container {
    let mut c = Container::new();
    c.set("kind", "probe");
    c.set("dtype", "f64");
    c.set("task", params.task);
    c.set("feature_dim", params.feature_dim());
    c.set("hidden", params.hidden());
    c.set("num_outputs", params.num_outputs());
    c.set("size", params.size);
    c.set(
        "channel_orders",
        params.channel_orders.iter().map(Order::to_string).collect::<Vec<_>>().join(","),
    );
    c.set("checksum", params.checksum());
    let to_f64 = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
    let mut proj = to_f64(params.proj_w.as_slice());
    proj.extend(to_f64(&params.proj_b));
    c.add_section("proj", f64_bytes(&proj));
    let mut head = Vec::new();
    match &params.head {
        Head::Tagging { w, b } | Head::Pair { w, b } => {
            head.extend(to_f64(w.as_slice()));
            head.extend(to_f64(b));
        }
        Head::Biaffine { arc, labels } => {
            head.extend(to_f64(arc.as_slice()));
            for l in labels {
                head.extend(to_f64(l.as_slice()));
            }
        }
    }
    c.add_section(&format!("head.{}", params.task), f64_bytes(&head));
    c.add_section("meta", params.labels.names().join("\n").into_bytes());
    c
}

pub fn params_from_container<T: Scalar>(c: &Container) -> Result<ProbeParams<T>> {
    if c.get("kind") != Some("probe") {
        return Err(Error::format(16, "not a probe container"));
    }
    let task: Task = c.require("task")?.parse()?;
    let feature_dim: usize = c.parse("feature_dim")?;
    let hidden: usize = c.parse("hidden")?;
    let n: usize = c.parse("num_outputs")?;
    let size: usize = c.parse("size")?;
    let channel_orders = c
        .require("channel_orders")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Order>>>()?;
    let meta = std::str::from_utf8(c.require_section("meta")?)
        .map_err(|_| Error::format(16, "meta section is not UTF-8"))?;
    let labels = LabelSet::from_names(meta.split('\n').filter(|s| !s.is_empty()));
    if labels.len() != n {
        return Err(Error::format(16, format!("{} label names for {n} outputs", labels.len())));
    }
    let cast = |v: &[f64]| v.iter().map(|&x| T::of(x)).collect::<Vec<T>>();
    let proj = read_f64s("proj", c.require_section("proj")?)?;
    if proj.len() != feature_dim * hidden + hidden {
        return Err(Error::format(16, "proj section has the wrong length"));
    }
    let proj_w = Matrix::from_vec(feature_dim, hidden, cast(&proj[..feature_dim * hidden]))?;
    let proj_b = cast(&proj[feature_dim * hidden..]);
    let name = format!("head.{task}");
    let raw = read_f64s(&name, c.require_section(&name)?)?;
    let bad = || Error::format(16, format!("{name} section has the wrong length"));
    let head = match task {
        Task::Pos | Task::Ner | Task::Re => {
            let rows = if task == Task::Re { 2 * hidden } else { hidden };
            if raw.len() != rows * n + n {
                return Err(bad());
            }
            let w = Matrix::from_vec(rows, n, cast(&raw[..rows * n]))?;
            let b = cast(&raw[rows * n..]);
            if task == Task::Re {
                Head::Pair { w, b }
            } else {
                Head::Tagging { w, b }
            }
        }
        Task::Dp => {
            let k = (hidden + 1) * (hidden + 1);
            if raw.len() != k * (n + 1) {
                return Err(bad());
            }
            let mut blocks = raw
                .chunks_exact(k)
                .map(|chunk| Matrix::from_vec(hidden + 1, hidden + 1, cast(chunk)))
                .collect::<Result<Vec<_>>>()?;
            let labels = blocks.split_off(1);
            Head::Biaffine {
                arc: blocks.pop().expect("one arc block"),
                labels,
            }
        }
    };
    let params = ProbeParams {
        task,
        proj_w,
        proj_b,
        head,
        labels,
        channel_orders,
        size,
    };
    if let Some(stored) = c.get("checksum") {
        if T::of(0.1).as_f64() == 0.1 && stored != params.checksum() {
            return Err(Error::format(16, "stored checksum does not match parameters"));
        }
    }
    Ok(params)
}
