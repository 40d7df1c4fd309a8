// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear-probe style readouts trained on stacked order-level maps.
//!
//! A probe trained on one model's stacks can be evaluated on another model's
//! stacks of the same texts without updating any parameter; the evaluation
//! path verifies that with a checksum.

pub mod data;
pub mod features;
pub mod metrics;
pub mod model;
pub mod params;
pub mod train;

pub use data::{
    align_example, align_tokens, collect_labels, grid_position, parse_label_file, Annotation, Arc, LabelRecord, LabelSet,
    LabeledExample, Query, Targets, Task,
};
pub use features::extract_features;
pub use metrics::{bio_spans, eval_probe, score_predictions, transfer_eval, Span, SpanCounts, TaskMetrics};
pub use model::{batch_loss_and_grad, loss, loss_and_grad, predict, probe_forward, Logits, Prediction};
pub use params::{params_container, params_from_container, Head, ProbeParams};
pub use train::{train_probe, TrainConfig, TrainLog};
