//! Sparse behavioral carriers over fine-tuning weight deltas, and
//! soft-trigger reversal of the behavior they carry, on a toy transformer.

pub mod carrier;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod eraser;
pub mod error;
pub mod eval;
pub mod lcdd;
pub mod losses;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod sft;

pub use error::{Error, Result};
