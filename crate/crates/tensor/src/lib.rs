//! Dense `f64` tensors, a recording tape for reverse-mode differentiation,
//! and the Adam optimiser.
//!
//! Everything runs single-threaded with a fixed reduction order, so a forward
//! or backward pass is bitwise reproducible.

mod adam;
pub mod gradcheck;
mod graph;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{Activation, CustomOp, ElemOp, Gradients, Graph, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}
