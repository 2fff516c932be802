//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] records every op as it executes; [`Graph::backward`] sweeps
//! the record in reverse and accumulates gradients into the leaves. Model
//! parameters are bound into a fresh graph per step with [`Graph::param`].

mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{CustomBackward, Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
