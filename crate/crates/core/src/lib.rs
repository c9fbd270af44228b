//! Multi-scale patch transformer for time-series forecasting.
//!
//! Attention in every block can be modulated by an exponential (Hawkes-style)
//! decay in the token gap and restricted by a causal mask. The crate ships its
//! own reverse-mode differentiation engine in [`tensor`].

pub mod error;
pub mod rng;
pub mod attention;
pub mod tensor;
pub mod container;
pub mod model;
pub mod data;
pub mod train;
pub mod cli;

pub use error::{Error, Result};
