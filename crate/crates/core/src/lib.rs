//! Continual learning under noisy labels with alternate experience replay.
//!
//! The crate trains a small dense network on a class-incremental stream.
//! Training epochs alternate between *buffer learning* (stream plus replay,
//! memory frozen) and *buffer forgetting* (stream only, memory updated with
//! low-loss candidates, weights restored from a checkpoint afterwards).
//! Replacement in the memory uses asymmetric balanced sampling.

pub mod buffer;
pub mod config;
pub mod consolidation;
pub mod engine;
pub mod error;
pub mod eval;
pub mod runner;
pub mod seed;
pub mod stream;
pub mod tensor;

pub use error::{Error, Result};
