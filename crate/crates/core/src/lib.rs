//! Parallel redundant modules, functional decoupling losses and progressive
//! mask-then-prune training for 3D segmentation networks.

// `!(x > 0.0)`-style checks deliberately reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod pruning;
pub mod report;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
