//! U-Net denoiser, its parameters, the Adam optimizer and checkpoints.

mod adam;
mod checkpoint;
mod params;
mod unet;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use params::{Param, Parameters};
pub use unet::{build_unet, Network, UNet, UNetConfig};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid U-Net configuration: {0}")]
    Config(String),
    #[error("input spatial size {height}x{width} must be a multiple of {multiple}")]
    Indivisible {
        height: usize,
        width: usize,
        multiple: usize,
    },
    #[error("expected {expected} parameter tensors, got {found}")]
    ParamCount { expected: usize, found: usize },
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
}
