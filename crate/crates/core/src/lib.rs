//! Preference optimization on linear and loglinear models: reward learning
//! from pairwise comparisons, regularized policy optimization, direct
//! preference optimization, and their deterministic-MDP counterparts.

pub mod cli;
pub mod domain;
pub mod dpo;
pub mod envgen;
pub mod error;
pub mod mdp;
pub mod metrics;
pub mod par;
pub mod rlhf;
pub mod rng;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
