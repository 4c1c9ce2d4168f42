//! Dense tensors, a reverse-mode tape, and the Adam optimizer.
//!
//! Everything here is generic over [`Real`] so the same model code runs in
//! `f32` for training and `f64` for gradient checking.

mod graph;
mod optim;
mod params;
mod real;
mod tensor;

pub use graph::{Backward, Graph, Var};
pub use optim::{Adam, AdamConfig, LinearWarmupDecay};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("{0}: empty input list")]
    Empty(&'static str),
}

pub type Result<T, E = KernelError> = std::result::Result<T, E>;
