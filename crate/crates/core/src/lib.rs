//! Cross-domain video moment retrieval on a small reverse-mode autodiff core.
//!
//! Videos and queries are encoded by shared attention/recurrent stacks,
//! fused by bidirectional cross-modal attention and trained in two stages:
//! supervised ranking on an annotated source domain, then a multi-task
//! objective that also aligns an unlabeled target domain (MMD on feature
//! statistics, cross-modal consistency and frame-level specific alignment).
//! Moments are localised by threshold expansion around the best frame.

// Validation is written as `!(x > 0.0)` on purpose so NaN is rejected too,
// and the numeric kernels index several arrays in lockstep.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod dataset;
pub mod diff;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradsuite;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod params;
pub mod synth;
pub mod trainer;
pub mod xmodal;

pub use dataset::{load_dataset, save_dataset, Domain, DomainDataset, Sample, UnlabeledDataset};
pub use error::{Error, Result};
pub use exec::Execution;
pub use inference::{expand_moment, top_n_moments, MomentBoundary, Prediction, ScoreSequence};
pub use metrics::{mean_iou, recall_at, temporal_iou, MetricsReport};
pub use model::{load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
pub use trainer::{main_train, pretrain, pretrain_from, TrainConfig, TrainOutcome};
