//! Consensus clustering on feature-vector data.
//!
//! An MLP encoder and projection head are trained jointly with a set of
//! cluster prototypes. The objective combines an instance-discrimination
//! loss over a memory bank with a consensus loss: soft cluster assignments
//! computed in M fixed, randomly transformed copies of the embedding space
//! are pulled toward equipartitioned Sinkhorn codes of the other view.
//!
//! Module map:
//! - [`dataio`]: datasets, synthetic blobs, feature-space augmentation, batching, CSV I/O
//! - [`nn`]: MLP forward/backward, L2 normalization, SGD with momentum
//! - [`softclust`]: prototype soft assignments and Sinkhorn-Knopp codes
//! - [`ensemble`]: random transformations and the consensus loss
//! - [`instdisc`]: memory bank and the NCE instance-discrimination loss
//! - [`trainer`]: the end-to-end training loop, checkpoints, feature extraction
//! - [`metrics`]: ACC/NMI/ARI, Hungarian matching, k-means, retrieval

pub mod dataio;
pub mod ensemble;
pub mod error;
pub mod instdisc;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod softclust;
pub mod trainer;

pub use dataio::{AugmentConfig, Batch, Dataset};
pub use ensemble::{EnsembleKind, TransformEnsemble};
pub use error::{Error, Result};
pub use instdisc::MemoryBank;
pub use metrics::{MetricReport, Partition};
pub use nn::{EncoderParams, HeadParams, Mlp};
pub use softclust::{AssignmentMatrix, CodeMatrix, Prototypes};
pub use trainer::{EpochStats, ModelState, TrainConfig};
