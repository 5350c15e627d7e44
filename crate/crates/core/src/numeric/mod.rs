//! Dense tensors, reverse-mode differentiation and gradient checking.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheck};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
