//! Reliability-balancing classification head over precomputed embeddings.
//!
//! A primary MLP distribution is corrected by two auxiliary distributions,
//! one from softmax-normalized proximity to trainable class anchors and one
//! from multi-head self-attention over the embedding, and the three are
//! blended by entropy-based confidence. The crate also provides the training
//! loop, the losses with exact gradients, evaluation metrics, a synthetic
//! embedding generator and an ablation harness.

pub mod data;
pub mod error;
pub mod experiment;
pub mod head;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod preprocess;
pub mod train;

pub use data::{Dataset, Sample, SyntheticSpec};
pub use error::{Error, Result};
pub use head::{HeadConfig, HeadParameters, PredictionRecord};
pub use losses::{LossReport, LossWeights};
pub use metrics::MetricsReport;
pub use numerics::{Matrix, RngState};
pub use train::{EpochRecord, TrainConfig};
