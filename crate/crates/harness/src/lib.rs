//! Command-line harness for echo-lora: run configuration, binary checkpoints,
//! metrics files and the ablation grid.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod metrics;
pub mod runner;

pub use error::{HarnessError, Result};
