//! Numerical kernels for studying what feedback can and cannot stabilize.
//!
//! The crate is `no_std` (it needs `alloc`). It contains:
//!
//! - [`models`]: exact one-step dynamics for every system class, noise and
//!   Markov-chain generators.
//! - [`analysis`]: closed-form stabilizability criteria and critical values.
//! - [`riccati`]: the coupled Riccati-like fixed-point solver for Markov jump
//!   linear systems, with a truncated-SVD pseudoinverse.
//! - [`controllers`]: causal feedback laws (least-squares minimum variance,
//!   nearest-neighbour switching, sampled-data and jump-system heuristics).
//! - [`adversary`]: Lipschitz function stores and greedy online adversaries.
//! - [`sim`]: episode execution, replay, Monte Carlo aggregation and audits.
//!
//! IO, configuration files and the command line live in the `feedback-lab`
//! companion crate.
#![no_std]
// `!(x > 0.0)` is how NaN gets rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adversary;
pub mod analysis;
pub mod controllers;
mod error;
pub mod models;
pub mod riccati;
pub mod sim;
pub mod wide;

pub use error::{Error, Result};

/// Seedable generator used for every episode.
pub type EpisodeRng = rand_chacha::ChaCha8Rng;
