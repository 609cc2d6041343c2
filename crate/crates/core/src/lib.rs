//! Reward learning from labels on synthesized hypothetical behavior.
//!
//! This crate is `no_std` (it needs `alloc`). It holds the numerical core:
//! small networks and Adam, the two benchmark domains, the trajectory
//! likelihood model, the ensemble reward classifier, acquisition functions,
//! query synthesis by trajectory optimization, the MPC agent, and the
//! experiment loop with its baselines and metrics. File formats, the CLI and
//! the labeling service live in the `querysynth` crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod acquisition;
pub mod env;
mod error;
pub mod generative;
pub mod harness;
pub mod math;
pub mod mpc;
pub mod numerics;
pub mod reward_model;
pub mod rng;
pub mod synthesis;

pub use error::{Error, Result};

#[cfg(test)]
mod proptests;
