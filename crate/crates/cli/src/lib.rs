//! Experiment driver behind the `subboost` binary.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;

pub use error::CliError;

/// Environment variable naming the default output root.
pub const RUNS_DIR_ENV: &str = "SUBBOOST_RUNS_DIR";
