// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention rollout and its order-level decomposition.
//!
//! With head-averaged layer attention `A(1) … A(N)`, rollout is
//! `(A(N)+I)·…·(A(1)+I)`. Expanding the product groups the `2^N` paths by how
//! many attention blocks they traverse: the order-`k` term sums the `C(N,k)`
//! products `A(ik)·…·A(i1)` over ascending layer subsets. Dividing each term
//! by `C(N,k)` gives the order-`k` map, and rollout is recovered as
//! `Σ_k C(N,k)·order_k`.
//!
//! Enumerating subsets is infeasible for deep models, so the terms are
//! accumulated with the prefix recurrence
//! `S_k(n) = S_k(n−1) + A(n)·S_{k−1}(n−1)`, `S_0 = I`, which costs
//! `O(N·max_order)` matrix products.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::{matmul, Matrix};
use crate::scalar::Scalar;
use crate::trace::AttentionTrace;

/// Orders analysed when none are requested.
pub const DEFAULT_MAX_ORDER: usize = 3;

/// Head-averaged attention, one `L x L` matrix per layer, first layer first.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention<T> {
    pub matrices: Vec<Matrix<T>>,
    pub causal: bool,
}

impl<T: Scalar> LayerAttention<T> {
    pub fn new(matrices: Vec<Matrix<T>>, causal: bool) -> Result<Self> {
        let first = matrices.first().ok_or(Error::Empty("layer list"))?;
        let shape = first.shape();
        if shape.0 != shape.1 {
            return Err(Error::dims("LayerAttention", "square matrices", format!("{shape:?}")));
        }
        if let Some(bad) = matrices.iter().find(|m| m.shape() != shape) {
            return Err(Error::dims("LayerAttention", format!("{shape:?}"), format!("{:?}", bad.shape())));
        }
        Ok(Self { matrices, causal })
    }

    pub fn num_layers(&self) -> usize {
        self.matrices.len()
    }

    pub fn seq_len(&self) -> usize {
        self.matrices[0].rows()
    }
}

/// Which term of the decomposition a map holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Order {
    /// Normalized order-`k` term.
    Level(usize),
    /// Full attention rollout.
    Rollout,
}

impl fmt::Display for Order {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Order::Level(k) => write!(f, "{k}"),
            Order::Rollout => f.write_str("rollout"),
        }
    }
}

impl FromStr for Order {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "rollout" => Ok(Order::Rollout),
            k => k
                .parse()
                .map(Order::Level)
                .map_err(|_| Error::Config(format!("invalid order {s:?}"))),
        }
    }
}

/// One decomposition term for one text under one model.
#[derive(Debug, Clone, PartialEq)]
pub struct OlaMap<T> {
    pub order: Order,
    pub matrix: Matrix<T>,
    pub model_id: String,
    pub text_id: String,
}

/// Averages attention over heads for every layer.
pub fn head_average<T: Scalar>(trace: &AttentionTrace) -> LayerAttention<T> {
    let (n, h, l) = (trace.num_layers(), trace.num_heads(), trace.seq_len());
    let inv = T::one() / T::of(h as f64);
    let matrices = (0..n)
        .map(|layer| {
            let mut acc = Matrix::<T>::zeros(l, l);
            for head in 0..h {
                let start = (layer * h + head) * l * l;
                for (a, &v) in acc.as_mut_slice().iter_mut().zip(&trace.attention[start..start + l * l]) {
                    *a += T::of(f64::from(v));
                }
            }
            acc.scale(inv)
        })
        .collect();
    LayerAttention {
        matrices,
        causal: trace.header.causal,
    }
}

/// `(A(N)+I)·…·(A(1)+I)`, accumulated from the first layer upward.
pub fn rollout<T: Scalar>(layers: &LayerAttention<T>) -> Matrix<T> {
    let mut acc = Matrix::identity(layers.seq_len());
    for a in &layers.matrices {
        let factor = a.plus_identity().expect("layer matrices are square");
        acc = matmul(&factor, &acc).expect("layer shapes agree");
    }
    acc
}

/// Normalized order-level maps for orders `0..=max_order`.
pub fn ola_orders<T: Scalar>(layers: &LayerAttention<T>, max_order: usize) -> Result<Vec<Matrix<T>>> {
    let n = layers.num_layers();
    if max_order > n {
        return Err(Error::OrderOutOfRange {
            order: max_order,
            layers: n,
        });
    }
    let l = layers.seq_len();
    // sums[k] = S_k(n) after processing n layers; S_k is zero for k > n.
    let mut sums: Vec<Matrix<T>> = (0..=max_order).map(|_| Matrix::zeros(l, l)).collect();
    sums[0] = Matrix::identity(l);
    for (idx, a) in layers.matrices.iter().enumerate() {
        let top = (idx + 1).min(max_order);
        // Descending so sums[k-1] still holds S_{k-1}(n-1).
        for k in (1..=top).rev() {
            let step = matmul(a, &sums[k - 1])?;
            sums[k].add_assign(&step)?;
        }
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(k, s)| s.scale(T::one() / T::of(binomial(n, k))))
        .collect())
}

/// Rollout plus the requested order maps, tagged with ids.
pub fn decompose<T: Scalar>(
    layers: &LayerAttention<T>,
    orders: &[Order],
    model_id: &str,
    text_id: &str,
) -> Result<Vec<OlaMap<T>>> {
    let max_order = orders
        .iter()
        .filter_map(|o| match o {
            Order::Level(k) => Some(*k),
            Order::Rollout => None,
        })
        .max();
    let levels = match max_order {
        Some(k) => ola_orders(layers, k)?,
        None => Vec::new(),
    };
    Ok(orders
        .iter()
        .map(|&order| OlaMap {
            order,
            matrix: match order {
                Order::Level(k) => levels[k].clone(),
                Order::Rollout => rollout(layers),
            },
            model_id: model_id.to_owned(),
            text_id: text_id.to_owned(),
        })
        .collect())
}

/// `Σ_k C(N,k)·order_k`; `orders[k]` must hold order `k` for every `k ≤ N`.
pub fn reconstruct_rollout<T: Scalar>(orders: &[Matrix<T>], num_layers: usize) -> Result<Matrix<T>> {
    if orders.len() != num_layers + 1 {
        return Err(Error::IncompleteOrders(format!(
            "{} maps supplied, orders 0..={num_layers} required",
            orders.len()
        )));
    }
    let mut acc = Matrix::zeros(orders[0].rows(), orders[0].cols());
    for (k, m) in orders.iter().enumerate() {
        acc.add_assign(&m.scale(T::of(binomial(num_layers, k))))?;
    }
    Ok(acc)
}

/// `C(n, k)` as a float. Exact integer arithmetic while it fits in `u128`
/// (every `n ≤ 130`), multiplicative float formula beyond.
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut exact: u128 = 1;
    for i in 1..=k as u128 {
        match exact.checked_mul(n as u128 - k as u128 + i) {
            Some(v) => exact = v / i,
            None => {
                return (1..=k).fold(1.0, |acc, i| acc * (n - k + i) as f64 / i as f64);
            }
        }
    }
    exact as f64
}
