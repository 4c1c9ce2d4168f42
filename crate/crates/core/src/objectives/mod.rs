//! Pre-training losses, the three granularity bundles and the weighted
//! curriculum.

mod curriculum;
mod losses;
mod views;

pub use curriculum::{
    compute_w_itm, curriculum_total, BatchSummary, CurriculumState, LossBundle, Schedule,
};
pub use losses::{itm_loss, mlm_loss, mrc_loss, mrfr_loss, p_mrtc_loss};
pub use views::{example_losses, ExampleLosses, ExampleViews, PlanTargets, View};

use thiserror::Error;

use crate::fusion::FusionError;
use crate::numkernel::KernelError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("{loss}: target {target} outside {classes} classes")]
    TargetOutOfRange {
        loss: &'static str,
        target: usize,
        classes: usize,
    },
    #[error("{loss}: {rows} prediction rows for {targets} targets")]
    RowMismatch {
        loss: &'static str,
        rows: usize,
        targets: usize,
    },
    #[error("p_mrtc: masked region {0} has no target tokens")]
    EmptyPhrase(usize),
    #[error("itm: label must be 0 or 1, got {0}")]
    BadLabel(u8),
    #[error("curriculum: epoch {epoch} >= warmup {warmup} requires w_ITM")]
    MissingWeight { epoch: u64, warmup: u64 },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}
