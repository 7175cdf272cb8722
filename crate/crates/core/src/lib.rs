//! Spike-and-slab variational Bayesian neural networks: joint inference over
//! which weights exist and what values they take.

pub mod data;
pub mod error;
pub mod inference;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod vi;

pub use error::{Error, Result};
