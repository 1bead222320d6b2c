//! Numerical laboratory for in-context factual recall with a one-layer
//! transformer reading out of an exact MLP associative memory.
//!
//! The `examples/` directory is the primary interface: each example is a
//! runnable experiment over one capability (memory construction, gradient
//! checks, the two-stage training dynamics, saddle diagnostics, few-shot
//! fine-tuning, pretraining). A thin `ic-recall` binary exposes the same
//! capabilities behind subcommands for scripted runs.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod error;
pub mod linalg;
pub mod memory;
pub mod model;
pub mod rng;
pub mod training;
pub mod vocab;

pub use error::{IcError, Result};
