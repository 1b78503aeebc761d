//! Echo-LoRA training on a small decoder-only transformer.
//!
//! Deep source-layer hidden states at the answer boundary are averaged into a
//! per-sample echo vector, projected and gated, and injected into shallow
//! LoRA/DoRA target modules during training only. The deployable model is the
//! plain adapted backbone.

pub mod adapters;
pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod echo;
pub mod error;
pub mod model;
pub mod objective;
pub mod rng;
pub mod routing;

pub use error::{Error, Result};
