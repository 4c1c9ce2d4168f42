use serde::{Deserialize, Serialize};

use super::ObjectiveError;
use crate::fusion::{FusedInput, FusionModel};
use crate::numkernel::Real;

/// The seven per-example (or batch-mean) loss values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub mlm_rt: f64,
    pub mrc: f64,
    pub mrfr: f64,
    pub mlm_rp: f64,
    pub p_mrtc: f64,
    pub mlm_is: f64,
    pub itm: f64,
}

impl LossBundle {
    /// Region-tag bundle; masked region modeling sums its two terms.
    pub fn l_rt(&self) -> f64 {
        self.mlm_rt + self.mrc + self.mrfr
    }

    pub fn l_rp(&self) -> f64 {
        self.mlm_rp + self.p_mrtc
    }

    pub fn l_is(&self) -> f64 {
        self.mlm_is + self.itm
    }

    pub fn mean(bundles: &[LossBundle]) -> LossBundle {
        let n = bundles.len().max(1) as f64;
        let mut m = LossBundle::default();
        for b in bundles {
            m.mlm_rt += b.mlm_rt;
            m.mrc += b.mrc;
            m.mrfr += b.mrfr;
            m.mlm_rp += b.mlm_rp;
            m.p_mrtc += b.p_mrtc;
            m.mlm_is += b.mlm_is;
            m.itm += b.itm;
        }
        m.mlm_rt /= n;
        m.mrc /= n;
        m.mrfr /= n;
        m.mlm_rp /= n;
        m.p_mrtc /= n;
        m.mlm_is /= n;
        m.itm /= n;
        m
    }
}

/// How the three granularities share a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// All three views of every example in every step.
    Sum,
    /// Step `s` trains only granularity `s mod 3` (region-tag, region-phrase,
    /// image-sentence).
    RoundRobin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    /// 0-based.
    pub epoch: u64,
    /// Epochs of plain summation before weighting starts.
    pub warmup_epochs: u64,
    /// Off reproduces the unweighted ablation arm.
    pub weighted: bool,
}

impl CurriculumState {
    pub fn needs_weight(&self) -> bool {
        self.weighted && self.epoch >= self.warmup_epochs
    }

    /// Multiplier on `L_RP + L_IS` for one example.
    pub fn coefficient(&self, w_itm: Option<f64>) -> Result<f64, ObjectiveError> {
        if !self.needs_weight() {
            return Ok(1.0);
        }
        w_itm.ok_or(ObjectiveError::MissingWeight {
            epoch: self.epoch,
            warmup: self.warmup_epochs,
        })
    }
}

/// Batch-level reduction of per-example losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub means: LossBundle,
    /// Mean coefficient applied to `L_RP + L_IS` (1 outside weighting).
    pub mean_w_itm: f64,
    /// Batch mean of `coefficient · (L_RP + L_IS)`.
    pub weighted_rp_is: f64,
    pub total: f64,
}

/// Batch mean of `L_RT + c_e · (L_RP + L_IS)` where `c_e` is 1 during warmup
/// and `w_ITM` of example `e` afterwards.
pub fn curriculum_total(
    bundles: &[LossBundle],
    w_itm: &[Option<f64>],
    state: &CurriculumState,
) -> Result<BatchSummary, ObjectiveError> {
    let n = bundles.len().max(1) as f64;
    let mut coef_sum = 0.0;
    let mut weighted = 0.0;
    let mut total = 0.0;
    for (i, b) in bundles.iter().enumerate() {
        let c = state.coefficient(w_itm.get(i).copied().flatten())?;
        let part = c * (b.l_rp() + b.l_is());
        coef_sum += c;
        weighted += part;
        total += b.l_rt() + part;
    }
    Ok(BatchSummary {
        means: LossBundle::mean(bundles),
        mean_w_itm: coef_sum / n,
        weighted_rp_is: weighted / n,
        total: total / n,
    })
}

/// `logistic(s)` of the match score, from a pass that builds no gradients.
pub fn compute_w_itm<T: Real>(
    model: &FusionModel<T>,
    input: &FusedInput,
) -> Result<T, ObjectiveError> {
    let s = model.itm_logit(input)?.as_f64();
    Ok(T::from_f64(1.0 / (1.0 + (-s).exp())))
}
