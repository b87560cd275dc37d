//! Minimal reverse-mode automatic differentiation over dense 2-D tensors.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;

