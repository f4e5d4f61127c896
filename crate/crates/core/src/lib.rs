//! Gradient-boosted ultra-low-parameter adapters.
//!
//! A frozen model is improved in rounds. Each round trains a tiny adapter
//! (a handful of scalars mixing fixed random projections inside a slice of
//! the weight SVD) on the examples the current model gets wrong, then merges
//! it into the weights. See the README for a walk-through.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod boosting;
pub mod bounds;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod grpo;
pub mod linalg;
pub mod model;
pub mod optim;

pub use error::{Error, Result};
