// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A value violated a documented invariant.
    #[error("validation error in {field}: {message}")]
    Validation { field: String, message: String },

    /// A container could not be decoded.
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("dimension mismatch in {op}: expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("order exceeds layer count: order {order} requested, trace has {layers} layers")]
    OrderOutOfRange { order: usize, layers: usize },

    #[error("incomplete order list: {0}")]
    IncompleteOrders(String),

    #[error("zero RMS (singular normalization) at {0}")]
    Singularity(String),

    #[error("degenerate row {row} in layer {layer}: row sums to zero")]
    DegenerateRow { layer: usize, row: usize },

    #[error("mixed identifiers: {0}")]
    MixedIds(String),

    #[error("no ground-truth gallery item for text id {0:?}")]
    MissingGroundTruth(String),

    #[error("text sets differ across models: {0}")]
    TextSetMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("task mismatch: parameters are for {params}, requested {requested}")]
    TaskMismatch { params: String, requested: String },

    #[error("parameters changed during evaluation (checksum {before} -> {after})")]
    Frozen { before: String, after: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("PNG encoding failed: {0}")]
    Png(#[from] png::EncodingError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn dims(op: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Dimension {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
