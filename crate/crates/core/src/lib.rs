//! Long-tailed out-of-distribution detection toolkit.
//!
//! Trains a three-state model (clean, mixup, reversed mixup) with a
//! prior-adjusted two-level loss, then flags out-of-distribution inputs by
//! the distance to the k-th nearest training embedding.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod data;
pub mod diffcore;
pub mod error;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod ood;

pub use error::{Error, Result};
