//! Experiment runner for `feedback-lab-core`: TOML configs, parallel Monte
//! Carlo, CSV/JSON tables and the `feedback-lab` command line.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod emit;
pub mod error;
pub mod experiments;
pub mod parallel;

pub use error::{LabError, LabResult};
