//! Dense f32 tensors with reverse-mode automatic differentiation.

pub mod gradcheck;
mod graph;
pub mod kernels;

pub use graph::{GradStore, Graph, Storage, TensorRef};
