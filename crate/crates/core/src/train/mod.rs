//! Seeded pre-training loop, metrics and resumption.

mod config;
mod data;
mod metrics;
pub(crate) mod rng;
mod trainer;

pub use config::TrainConfig;
pub use data::{build_vocab, TrainingData};
pub use metrics::{append_metrics, read_metrics, write_metrics, MetricsRow};
pub use trainer::{RunSummary, Trainer};

use thiserror::Error;

use crate::aligner::AlignError;
use crate::corpus::CorpusError;
use crate::fusion::FusionError;
use crate::numkernel::KernelError;
use crate::objectives::ObjectiveError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint does not match the run configuration: field `{0}` differs")]
    ConfigMismatch(String),
    #[error("data: {0}")]
    Data(String),
    #[error("io: {0}")]
    Io(String),
    #[error("training already finished at step {0}")]
    Finished(u64),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}
