// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::preprocess::OlaStack;
use crate::scalar::Scalar;

/// Token features from a stack: token `t` is the concatenation, channel by
/// channel, of row `t` followed by column `t`. Output is `size x 2·C·size`.
pub fn extract_features<T: Scalar>(stack: &OlaStack<T>) -> Result<Matrix<T>> {
    let size = stack.size();
    if let Some(bad) = stack.channels.iter().find(|c| c.shape() != (size, size)) {
        return Err(Error::dims("extract_features", format!("{size}x{size} channels"), format!("{:?}", bad.shape())));
    }
    let dim = 2 * stack.channels.len() * size;
    let mut out = Matrix::zeros(size, dim);
    for t in 0..size {
        let row = out.row_mut(t);
        for (c, ch) in stack.channels.iter().enumerate() {
            let base = 2 * c * size;
            row[base..base + size].copy_from_slice(ch.row(t));
            for (k, v) in row[base + size..base + 2 * size].iter_mut().enumerate() {
                *v = ch[(k, t)];
            }
        }
    }
    Ok(out)
}
