//! Dense tensors with reverse-mode automatic differentiation.

mod graph;
pub mod gradcheck;
mod tensor;

pub use graph::{grad_tensor, Graph, Var};
pub use tensor::Tensor;
