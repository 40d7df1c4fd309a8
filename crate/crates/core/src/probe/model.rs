// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward pass, loss and analytic gradients of the probe.
//!
//! Hidden states are `h_p = tanh(F_p·W + b)` for the grid positions a task
//! actually touches. Heads:
//!
//! * tagging: `softmax(h_p·W_t + b_t)` per labelled position;
//! * pair: the two entity spans are mean-pooled and concatenated;
//! * biaffine: with `ĥ = [h; 1]`, the arc score of dependent `i` and head `j`
//!   is `ĥ_iᵀ U ĥ_j`, normalised over the candidate heads of `i`, and label
//!   `l` scores `ĥ_iᵀ U_l ĥ_j` at the head.
//!
//! Loss is the summed cross-entropy over all targets of an example.

use rayon::prelude::*;

use super::data::{Arc, LabeledExample, Query, Targets, Task};
use super::features::extract_features;
use super::params::{Head, ProbeParams};
use crate::error::{Error, Result};
use crate::linalg::{matmul, Matrix};
use crate::preprocess::OlaStack;
use crate::scalar::Scalar;

/// Task output for one example.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    /// `(position, label)` for every queried position.
    Tags(Vec<(usize, usize)>),
    Relation(usize),
    /// One arc per candidate position acting as dependent.
    Arcs(Vec<Arc>),
}

/// Hidden states for a sorted, de-duplicated set of positions.
struct Hidden<T> {
    positions: Vec<usize>,
    features: Matrix<T>,
    h: Matrix<T>,
}

impl<T: Scalar> Hidden<T> {
    fn index(&self, p: usize) -> usize {
        self.positions.binary_search(&p).expect("position was requested")
    }
}

fn check_compat<T: Scalar>(params: &ProbeParams<T>, stack: &OlaStack<T>) -> Result<()> {
    if stack.size() != params.size || stack.channel_orders != params.channel_orders {
        return Err(Error::dims(
            "probe",
            format!("{}x{} stack with channels {:?}", params.size, params.size, params.channel_orders),
            format!("{}x{} stack with channels {:?}", stack.size(), stack.size(), stack.channel_orders),
        ));
    }
    Ok(())
}

fn hidden<T: Scalar>(params: &ProbeParams<T>, stack: &OlaStack<T>, wanted: impl IntoIterator<Item = usize>) -> Result<Hidden<T>> {
    check_compat(params, stack)?;
    let mut positions: Vec<usize> = wanted.into_iter().collect();
    positions.sort_unstable();
    positions.dedup();
    if positions.last().is_some_and(|&p| p >= params.size) {
        return Err(Error::validation("targets", "position outside the grid"));
    }
    let all = extract_features(stack)?;
    let features = Matrix::from_fn(positions.len(), all.cols(), |r, c| all[(positions[r], c)]);
    let mut h = matmul(&features, &params.proj_w)?;
    for r in 0..h.rows() {
        for (v, &b) in h.row_mut(r).iter_mut().zip(&params.proj_b) {
            *v = (*v + b).tanh();
        }
    }
    Ok(Hidden { positions, features, h })
}

fn query_positions(q: &Query) -> Vec<usize> {
    match q {
        Query::Tokens(p) => p.clone(),
        Query::Pair { e1, e2 } => e1.iter().chain(e2).copied().collect(),
        Query::Arcs { candidates } => candidates.clone(),
    }
}

fn affine<T: Scalar>(x: &[T], w: &Matrix<T>, b: &[T]) -> Vec<T> {
    let mut out = b.to_vec();
    for (k, &xk) in x.iter().enumerate() {
        for (o, &wkj) in out.iter_mut().zip(w.row(k)) {
            *o += xk * wkj;
        }
    }
    out
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Softmax probabilities and the cross-entropy against `gold`.
fn softmax_xent<T: Scalar>(z: &[T], gold: usize) -> (Vec<T>, T) {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    let loss = s.ln() + m - z[gold];
    (e.into_iter().map(|v| v / s).collect(), loss)
}

fn augmented<T: Scalar>(h: &Matrix<T>, rows: &[usize]) -> Matrix<T> {
    let d = h.cols();
    Matrix::from_fn(rows.len(), d + 1, |r, c| if c == d { T::one() } else { h[(rows[r], c)] })
}

/// `xᵀ U y`.
fn bilinear<T: Scalar>(x: &[T], u: &Matrix<T>, y: &[T]) -> T {
    let mut total = T::zero();
    for (i, &xi) in x.iter().enumerate() {
        let row: T = u.row(i).iter().zip(y).map(|(&a, &b)| a * b).sum();
        total += xi * row;
    }
    total
}

fn pool<T: Scalar>(hid: &Hidden<T>, span: &[usize]) -> Vec<T> {
    let mut out = vec![T::zero(); hid.h.cols()];
    for &p in span {
        for (o, &v) in out.iter_mut().zip(hid.h.row(hid.index(p))) {
            *o += v;
        }
    }
    let n = T::of(span.len() as f64);
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Raw task scores for the positions named by a [`Query`].
#[derive(Debug, Clone, PartialEq)]
pub enum Logits<T> {
    /// One row of tag scores per queried position, in query order.
    Tags(Matrix<T>),
    Relation(Vec<T>),
    /// `arc[(i, j)]` scores candidate `j` as head of candidate `i`;
    /// `labels[l][(i, j)]` scores label `l` on that arc.
    Arcs { arc: Matrix<T>, labels: Vec<Matrix<T>> },
}

/// Projection, `tanh` and task head for one stack.
pub fn probe_forward<T: Scalar>(params: &ProbeParams<T>, stack: &OlaStack<T>, query: &Query) -> Result<Logits<T>> {
    let hid = hidden(params, stack, query_positions(query))?;
    match (&params.head, query) {
        (Head::Tagging { w, b }, Query::Tokens(positions)) => {
            let mut out = Matrix::zeros(positions.len(), params.num_outputs());
            for (r, &p) in positions.iter().enumerate() {
                out.row_mut(r).copy_from_slice(&affine(hid.h.row(hid.index(p)), w, b));
            }
            Ok(Logits::Tags(out))
        }
        (Head::Pair { w, b }, Query::Pair { e1, e2 }) => {
            check_spans(e1, e2)?;
            let mut r = pool(&hid, e1);
            r.extend(pool(&hid, e2));
            Ok(Logits::Relation(affine(&r, w, b)))
        }
        (Head::Biaffine { arc, labels }, Query::Arcs { candidates }) => {
            let rows: Vec<usize> = candidates.iter().map(|&p| hid.index(p)).collect();
            let hh = augmented(&hid.h, &rows);
            let ht = hh.transpose();
            Ok(Logits::Arcs {
                arc: matmul(&hh, &matmul(arc, &ht)?)?,
                labels: labels
                    .iter()
                    .map(|u| matmul(&hh, &matmul(u, &ht)?))
                    .collect::<Result<_>>()?,
            })
        }
        _ => Err(mismatch(params.task, query)),
    }
}

/// Predicts the task output at the positions named by `query`. Ties go to
/// the lowest index.
pub fn predict<T: Scalar>(params: &ProbeParams<T>, stack: &OlaStack<T>, query: &Query) -> Result<Prediction> {
    Ok(match (probe_forward(params, stack, query)?, query) {
        (Logits::Tags(z), Query::Tokens(positions)) => {
            Prediction::Tags(positions.iter().enumerate().map(|(r, &p)| (p, argmax(z.row(r)))).collect())
        }
        (Logits::Relation(z), _) => Prediction::Relation(argmax(&z)),
        (Logits::Arcs { arc, labels }, Query::Arcs { candidates }) => Prediction::Arcs(
            (0..candidates.len())
                .map(|i| {
                    let j = argmax(arc.row(i));
                    let label_scores: Vec<T> = labels.iter().map(|l| l[(i, j)]).collect();
                    Arc {
                        dependent: candidates[i],
                        head: candidates[j],
                        label: argmax(&label_scores),
                    }
                })
                .collect(),
        ),
        _ => unreachable!("probe_forward matches the query shape"),
    })
}

fn check_spans(e1: &[usize], e2: &[usize]) -> Result<()> {
    if e1.is_empty() || e2.is_empty() {
        return Err(Error::validation("targets", "entity span is empty"));
    }
    Ok(())
}

fn mismatch(task: Task, query: &Query) -> Error {
    let requested = match query {
        Query::Tokens(_) => "token tagging",
        Query::Pair { .. } => "entity pair",
        Query::Arcs { .. } => "dependency arcs",
    };
    Error::TaskMismatch {
        params: task.to_string(),
        requested: requested.into(),
    }
}

/// Summed cross-entropy of one example.
pub fn loss<T: Scalar>(params: &ProbeParams<T>, stack: &OlaStack<T>, targets: &Targets) -> Result<T> {
    loss_impl(params, stack, targets, None)
}

/// Loss of one example and its gradient, accumulated into `grad`.
pub fn loss_and_grad<T: Scalar>(
    params: &ProbeParams<T>,
    stack: &OlaStack<T>,
    targets: &Targets,
    grad: &mut ProbeParams<T>,
) -> Result<T> {
    loss_impl(params, stack, targets, Some(grad))
}

/// Summed loss and gradient over a batch. Per-example gradients are summed
/// in batch order, so a batch is an exact multiset sum of its examples.
pub fn batch_loss_and_grad<T: Scalar>(
    params: &ProbeParams<T>,
    batch: &[&LabeledExample<T>],
) -> Result<(T, ProbeParams<T>)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let per_example = batch
        .par_iter()
        .map(|ex| {
            let mut g = params.zeros_like();
            let l = loss_and_grad(params, &ex.stack, &ex.targets, &mut g)?;
            Ok((l, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grad = params.zeros_like();
    let mut total = T::zero();
    for (l, g) in &per_example {
        total += *l;
        grad.axpy(T::one(), g);
    }
    Ok((total, grad))
}

fn loss_impl<T: Scalar>(
    params: &ProbeParams<T>,
    stack: &OlaStack<T>,
    targets: &Targets,
    mut grad: Option<&mut ProbeParams<T>>,
) -> Result<T> {
    let query = targets.query();
    let hid = hidden(params, stack, query_positions(&query))?;
    let hidden_dim = params.hidden();
    let n_out = params.num_outputs();
    let mut dh = Matrix::<T>::zeros(hid.h.rows(), hidden_dim);
    let mut total = T::zero();
    let bad_label = |l: usize| {
        if l >= n_out {
            Err(Error::validation("targets", format!("label id {l} outside {n_out} outputs")))
        } else {
            Ok(())
        }
    };

    match (&params.head, targets) {
        (Head::Tagging { w, b }, Targets::Tags(tags)) => {
            for &(p, y) in tags {
                bad_label(y)?;
                let r = hid.index(p);
                let (mut probs, l) = softmax_xent(&affine(hid.h.row(r), w, b), y);
                total += l;
                probs[y] -= T::one();
                if let Some(g) = grad.as_deref_mut() {
                    let Head::Tagging { w: gw, b: gb } = &mut g.head else { unreachable!() };
                    outer_acc(gw, hid.h.row(r), &probs);
                    add_into(gb, &probs);
                    add_into(dh.row_mut(r), &mat_vec(w, &probs));
                }
            }
        }
        (Head::Pair { w, b }, Targets::Relation { e1, e2, relation }) => {
            check_spans(e1, e2)?;
            bad_label(*relation)?;
            let mut r = pool(&hid, e1);
            r.extend(pool(&hid, e2));
            let (mut probs, l) = softmax_xent(&affine(&r, w, b), *relation);
            total += l;
            probs[*relation] -= T::one();
            if let Some(g) = grad.as_deref_mut() {
                let Head::Pair { w: gw, b: gb } = &mut g.head else { unreachable!() };
                outer_acc(gw, &r, &probs);
                add_into(gb, &probs);
                let dr = mat_vec(w, &probs);
                for (span, part) in [(e1, &dr[..hidden_dim]), (e2, &dr[hidden_dim..])] {
                    let inv = T::one() / T::of(span.len() as f64);
                    let share: Vec<T> = part.iter().map(|&v| v * inv).collect();
                    for &p in span {
                        add_into(dh.row_mut(hid.index(p)), &share);
                    }
                }
            }
        }
        (Head::Biaffine { arc, labels }, Targets::Arcs { arcs, candidates }) => {
            let rows: Vec<usize> = candidates.iter().map(|&p| hid.index(p)).collect();
            let cand_index = |p: usize| {
                candidates
                    .iter()
                    .position(|&c| c == p)
                    .ok_or_else(|| Error::validation("targets", format!("position {p} is not a candidate")))
            };
            let hh = augmented(&hid.h, &rows);
            let u_ht = matmul(arc, &hh.transpose())?;
            let scores = matmul(&hh, &u_ht)?;
            let m = candidates.len();
            let mut ds = Matrix::<T>::zeros(m, m);
            let mut dhh = Matrix::<T>::zeros(m, hidden_dim + 1);
            let mut dlabels: Vec<Matrix<T>> = Vec::new();
            if grad.is_some() {
                dlabels = vec![Matrix::zeros(hidden_dim + 1, hidden_dim + 1); labels.len()];
            }
            for a in arcs {
                bad_label(a.label)?;
                let (i, j) = (cand_index(a.dependent)?, cand_index(a.head)?);
                let (probs, l) = softmax_xent(scores.row(i), j);
                total += l;
                let (xi, xj) = (hh.row(i), hh.row(j));
                let label_scores: Vec<T> = labels.iter().map(|u| bilinear(xi, u, xj)).collect();
                let (mut lp, ll) = softmax_xent(&label_scores, a.label);
                total += ll;
                if grad.is_some() {
                    for (d, &p) in ds.row_mut(i).iter_mut().zip(&probs) {
                        *d += p;
                    }
                    ds[(i, j)] -= T::one();
                    lp[a.label] -= T::one();
                    for (k, (u, du)) in labels.iter().zip(dlabels.iter_mut()).enumerate() {
                        let g = lp[k];
                        let scaled_i: Vec<T> = xi.iter().map(|&v| v * g).collect();
                        outer_acc(du, &scaled_i, xj);
                        let to_i = mat_vec(u, xj);
                        let to_j = mat_vec_t(u, xi);
                        for c in 0..=hidden_dim {
                            dhh[(i, c)] += g * to_i[c];
                            dhh[(j, c)] += g * to_j[c];
                        }
                    }
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                let Head::Biaffine { arc: garc, labels: glabels } = &mut g.head else { unreachable!() };
                // dU = Ĥᵀ·dS·Ĥ
                let d_arc = matmul(&hh.transpose(), &matmul(&ds, &hh)?)?;
                garc.add_assign(&d_arc)?;
                for (gl, dl) in glabels.iter_mut().zip(&dlabels) {
                    gl.add_assign(dl)?;
                }
                // dĤ = dS·(Ĥ·Uᵀ) + dSᵀ·(Ĥ·U)
                let from_rows = matmul(&ds, &u_ht.transpose())?;
                let from_cols = matmul(&ds.transpose(), &matmul(&hh, arc)?)?;
                for (k, &r) in rows.iter().enumerate() {
                    let target = dh.row_mut(r);
                    for c in 0..hidden_dim {
                        target[c] += dhh[(k, c)] + from_rows[(k, c)] + from_cols[(k, c)];
                    }
                }
            }
        }
        _ => return Err(mismatch(params.task, &query)),
    }

    if let Some(g) = grad {
        // Back through tanh and the projection.
        let mut dpre = dh;
        for r in 0..dpre.rows() {
            for (d, &h) in dpre.row_mut(r).iter_mut().zip(hid.h.row(r)) {
                *d *= T::one() - h * h;
            }
            add_into(&mut g.proj_b, dpre.row(r));
        }
        let dw = matmul(&hid.features.transpose(), &dpre)?;
        g.proj_w.add_assign(&dw)?;
    }
    Ok(total)
}

/// `m += x ⊗ y`.
fn outer_acc<T: Scalar>(m: &mut Matrix<T>, x: &[T], y: &[T]) {
    for (i, &xi) in x.iter().enumerate() {
        if xi.is_zero() {
            continue;
        }
        for (o, &yj) in m.row_mut(i).iter_mut().zip(y) {
            *o += xi * yj;
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `m · v`.
fn mat_vec<T: Scalar>(m: &Matrix<T>, v: &[T]) -> Vec<T> {
    (0..m.rows())
        .map(|r| m.row(r).iter().zip(v).map(|(&a, &b)| a * b).sum())
        .collect()
}

/// `mᵀ · v`.
fn mat_vec_t<T: Scalar>(m: &Matrix<T>, v: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); m.cols()];
    for (r, &vr) in v.iter().enumerate() {
        add_into(&mut out, &m.row(r).iter().map(|&x| x * vr).collect::<Vec<_>>());
    }
    out
}
