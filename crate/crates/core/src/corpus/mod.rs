//! Synthetic planted world, dataset files, alignment-ratio mixing and
//! checkpoints.

mod checkpoint;
mod formats;
mod mix;
mod world;

pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, Checkpoint, CheckpointMeta, Digests, Manifest,
    OptimizerEntry, ParamEntry, RngState, CHECKPOINT_VERSION,
};
pub use formats::{
    read_images, read_pairs, read_texts, read_truth, validate_pairs, write_images, write_pairs,
    write_texts, write_truth, write_world, Header, ImageFile, PairFile, TextFile, SCHEMA_VERSION,
};
pub use mix::mix_alignment_ratio;
pub use world::{
    generate_world, PhraseTruth, TextRecord, TruthRecord, World, WorldSpec, WorldSplit,
};

use thiserror::Error;

use crate::numkernel::KernelError;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: line {line}: {message}")]
    Validation {
        file: String,
        line: usize,
        message: String,
    },
    #[error("invalid world spec: {0}")]
    Spec(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint digest mismatch in {0}")]
    DigestMismatch(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}
