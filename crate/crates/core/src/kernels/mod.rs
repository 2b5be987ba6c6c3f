//! Dense `f32` kernels with reverse-mode differentiation.

mod gemm;
mod graph;
mod tensor;

pub use graph::{AttentionLayout, Gradients, Graph, RotationTable, Var};
pub use tensor::Tensor;
