// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::SliceRandom;
use super::data::{LabelSet, LabeledExample};
use super::model::batch_loss_and_grad;
use super::params::ProbeParams;
use crate::error::{Error, Result};
use crate::rng::stage_rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 0.05,
            batch_size: 16,
            hidden: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::Config("epochs, batch_size and hidden must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Mean per-example loss after each epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
}

/// Mini-batch gradient descent on summed cross-entropy. Each step moves by
/// `lr · Σ grad / |batch|`. Per-example gradients are computed in parallel
/// but summed in batch order, so results do not depend on the thread count.
pub fn train_probe<T: Scalar>(
    examples: &[LabeledExample<T>],
    labels: LabelSet,
    config: &TrainConfig,
) -> Result<(ProbeParams<T>, TrainLog)> {
    config.validate()?;
    let first = examples.first().ok_or(Error::Empty("training examples"))?;
    if let Some(bad) = examples.iter().find(|e| e.task != first.task) {
        return Err(Error::TaskMismatch {
            params: first.task.to_string(),
            requested: bad.task.to_string(),
        });
    }
    let mut params = ProbeParams::init(
        first.task,
        labels,
        first.stack.channel_orders.clone(),
        first.stack.size(),
        config.hidden,
        config.seed,
    )?;
    let mut shuffle = stage_rng(config.seed, "probe-shuffle");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let members: Vec<&LabeledExample<T>> = batch.iter().map(|&i| &examples[i]).collect();
            let (loss, grad) = batch_loss_and_grad(&params, &members)?;
            epoch_loss += loss.as_f64();
            params.axpy(T::of(-config.learning_rate / batch.len() as f64), &grad);
        }
        let mean = epoch_loss / examples.len() as f64;
        if !mean.is_finite() || !params.is_finite() {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        log.epoch_loss.push(mean);
    }
    Ok((params, log))
}
