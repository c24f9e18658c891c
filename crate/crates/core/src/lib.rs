//! One-shot N:M pruning of linear layers.
//!
//! The pipeline scores every weight with an activation-aware metric, searches
//! a channel order that lets the N:M mask keep as much metric mass as
//! possible, masks the weight without updating survivors, and packs 2:4
//! results into a compressed format executed by a reference sparse GEMM.

pub mod error;
pub mod metrics;
pub mod packed;
pub mod pattern;
pub mod pruner;
pub mod shuffle;
pub mod stats;
pub mod store;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use metrics::{MetricKind, MetricMatrix};
pub use packed::PackedSparseWeight;
pub use pattern::SparsityPattern;
pub use pruner::{PruneConfig, PruneResult};
pub use shuffle::{Permutation, ShuffleConfig, ShuffleMode};
pub use stats::ChannelStats;
pub use store::{LayerBundle, Manifest};
pub use tensor::{DType, TensorF};
