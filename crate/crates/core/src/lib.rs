//! Deterministic simulator of over-the-air federated learning with
//! one-shot and iterative magnitude pruning.
//!
//! Clients train a small dense network on i.i.d. shards, transmit
//! pseudo-gradients that superpose over a noisy analog channel, and the
//! server applies the noisy mean. Pruning events, scheduled on the round
//! timeline, restrict training to a global magnitude mask.

pub mod channel;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fed;
pub mod nn;
pub mod pruning;
pub mod rng;

pub use error::{Error, Result};
