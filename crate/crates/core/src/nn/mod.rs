//! Minimal reverse-mode autodiff, layer kernels and optimization.

mod graph;
pub mod kernels;
mod optim;
mod scalar;
mod tensor;

pub use graph::{AttentionSpec, Graph, Var};
pub use optim::{AdamW, AdamWConfig, LrSchedule, Moments};
pub use scalar::{gemm, MatMut, MatRef, Scalar};
pub use tensor::Tensor;
