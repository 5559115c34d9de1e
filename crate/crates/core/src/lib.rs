//! Active perception agent: simulated bin world, camera head, foveated
//! observations, generative scene representation and the two SAC policies,
//! plus the training and evaluation harness.

pub mod fovea;
pub mod head;
pub mod raycam;
pub mod scene;
pub mod gqn;
pub mod sac;
pub mod episode;
pub mod config;
pub mod harness;
pub mod plots;
pub mod reach;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("object placement failed: {0}")]
    Placement(String),
    #[error("ik did not converge (position residual {position_residual:.3e} m, orientation residual {orientation_residual:.3e} rad)")]
    Ik {
        position_residual: f64,
        orientation_residual: f64,
    },
    #[error("viewpoint sampling failed: {0}")]
    Viewpoint(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("training error: {0}")]
    Training(String),
    #[error(transparent)]
    Tensor(apr_tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<apr_tensor::TensorError> for CoreError {
    // file errors keep their own variant so callers can map them to an exit code
    fn from(e: apr_tensor::TensorError) -> Self {
        match e {
            apr_tensor::TensorError::Io(io) => CoreError::Io(io),
            other => CoreError::Tensor(other),
        }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
