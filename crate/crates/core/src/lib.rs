//! Cluster pruning for feed-forward networks.
//!
//! Filters of each prunable layer are described by features taken from their
//! incoming and outgoing weights, grouped with Ward-linkage hierarchical
//! clustering, and reduced to one representative per cluster. The consumer
//! layer is rewired so the pruned network stays shape-consistent. Pruning can
//! run once on a trained model or interleaved with training under a flops
//! budget.

pub mod clustering;
pub mod data_ingest;
pub mod error;
pub mod features;
pub mod model;
pub mod numerics;
pub mod pruner;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
