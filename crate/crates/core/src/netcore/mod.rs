//! Minimal differentiable numeric core and the detector built on it.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod net;
mod params;
mod tensor;

use thiserror::Error;

pub use graph::{Gradients, Graph, Var, MAX_LOG_SCALE};
pub use net::{DetectorNet, Flavor, NetConfig, Pyramid, Reference};
pub use params::{he_uniform, sgd_step, Param, ParamSet};
pub use tensor::{round_to_f32, Tensor};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("backward called twice on the same graph")]
    BackwardTwice,
    #[error("backward requires a scalar loss")]
    NotScalar,
    #[error("cannot normalize a zero vector")]
    ZeroNorm,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
