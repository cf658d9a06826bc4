//! Reverse-mode automatic differentiation over dense row-major tensors.

pub mod check;
mod graph;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::Tensor;
