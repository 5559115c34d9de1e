//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s; calling
//! [`Graph::backward`] on a scalar walks the tape once in reverse. Learned
//! weights live in [`ParamStore`]s, are copied into a graph on first use and
//! receive their gradients through [`Gradients::for_store`].

pub mod adam;
pub mod checkpoint;
mod conv;
pub mod dist;
mod graph;
pub mod gradcheck;
pub mod nn;
mod params;
mod real;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, StepOutcome};
pub use graph::{grad_norm, Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
