//! Single-stream fusion transformer over text tokens and image regions.

mod config;
mod input;
mod model;
mod probe;

pub use config::ModelConfig;
pub use input::{encode_box_geometry, FusedInput};
pub use model::{ForwardOutput, FusionModel, HeadQuery};
pub use probe::{attention_probe, AttentionMaps};

use thiserror::Error;

use crate::numkernel::KernelError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("{what} length {len} exceeds maximum {max}")]
    TooLong {
        what: &'static str,
        len: usize,
        max: usize,
    },
    #[error("degenerate box {0:?} in a {1}x{2} image")]
    DegenerateBox([f32; 4], f32, f32),
    #[error("region feature dimension {got} != configured {expected}")]
    FeatureDim { got: usize, expected: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("parameter {name}: {reason}")]
    Param { name: String, reason: String },
}
