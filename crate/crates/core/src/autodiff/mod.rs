//! Minimal dense-tensor engine with reverse-mode differentiation.

pub mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use graph::{Gradients, Graph, MaskedLoss, Var, IGNORE_INDEX, KL_EPS};
pub use tensor::{Tensor, TensorId};

#[cfg(test)]
mod tests;
