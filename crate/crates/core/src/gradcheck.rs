//! End-to-end gradient check of the fusion model against finite differences.

use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::aligner::{
    BoundingBox, MaskModality, MaskPlan, Region, RegionMask, RegionSet, RegionTarget, TextAction,
    TextMask, NUM_SPECIAL,
};
use crate::fusion::{FusedInput, FusionError, FusionModel, ModelConfig};
use crate::numkernel::Graph;
use crate::objectives::{example_losses, ExampleViews, ObjectiveError, View};

/// Loss names in evaluation order; the last one is the weighted objective.
pub const CHECKED_LOSSES: [&str; 8] = [
    "mlm_rt",
    "mrc",
    "mrfr",
    "mlm_rp",
    "p_mrtc",
    "mlm_is",
    "itm",
    "objective",
];

const OBJECTIVE_WEIGHT: f64 = 0.7;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("fixture needs at least {0}")]
    Fixture(&'static str),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Coordinates checked per parameter tensor.
    pub samples_per_param: usize,
    /// Step of the five-point central difference.
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
    /// Scales the analytic gradient of this parameter by 1.5; a negative
    /// control that must fail.
    pub corrupt: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            samples_per_param: 16,
            step: 1e-3,
            floor: 1e-6,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Loss that produced the maximum.
    pub worst_loss: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    /// Maximum relative error per loss, in [`CHECKED_LOSSES`] order.
    pub losses: Vec<(&'static str, f64)>,
    pub max_rel_err: f64,
    pub elapsed: Duration,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

struct Fixture {
    region_tag: View,
    region_phrase: View,
    image_sentence: View,
    image_match: View,
}

impl Fixture {
    fn views(&self) -> ExampleViews<'_> {
        ExampleViews {
            region_tag: Some(&self.region_tag),
            region_phrase: Some(&self.region_phrase),
            image_sentence: Some(&self.image_sentence),
            image_match: Some(&self.image_match),
        }
    }
}

fn fixture(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Fixture, GradCheckError> {
    let special = NUM_SPECIAL as usize;
    if config.vocab_size <= special + 1 {
        return Err(GradCheckError::Fixture("two non-special tokens"));
    }
    if config.max_regions < 3 || config.max_tokens < 10 {
        return Err(GradCheckError::Fixture("3 regions and 10 text positions"));
    }
    let token = |rng: &mut ChaCha8Rng| rng.gen_range(NUM_SPECIAL..config.vocab_size as u32);
    let regions = RegionSet {
        id: 0,
        width: 100.0,
        height: 80.0,
        regions: (0..3)
            .map(|_| {
                let x1 = rng.gen_range(0.0..50.0);
                let y1 = rng.gen_range(0.0..40.0);
                Region {
                    feature: (0..config.feature_dim)
                        .map(|_| rng.gen_range(-1.0..1.0))
                        .collect(),
                    bbox: BoundingBox::new(
                        x1,
                        y1,
                        x1 + rng.gen_range(5.0..50.0),
                        y1 + rng.gen_range(5.0..40.0),
                    ),
                    tag: "x".into(),
                    class_id: rng.gen_range(0..config.num_classes as u32),
                    confidence: 1.0,
                }
            })
            .collect(),
    };
    let tags: Vec<u32> = (0..3).map(|_| token(rng)).collect();
    let sentence: Vec<u32> = (0..8).map(|_| token(rng)).collect();
    let mask = |position: usize, target: u32, action| TextMask {
        position,
        target,
        action,
    };
    let rt_plan = MaskPlan {
        modality: MaskModality::Both,
        text: vec![
            mask(0, tags[0], TextAction::Mask),
            mask(2, tags[2], TextAction::Random(token(rng))),
        ],
        regions: vec![RegionMask {
            region: 1,
            target: RegionTarget::ClassAndFeature {
                class_id: regions.regions[1].class_id,
                feature: regions.regions[1].feature.clone(),
            },
        }],
        selected_links: vec![],
        forced_link: None,
    };
    // Both modalities at once so that one view exercises both heads.
    let rn_plan = MaskPlan {
        modality: MaskModality::Both,
        text: vec![
            mask(3, sentence[3], TextAction::Mask),
            mask(4, sentence[4], TextAction::Mask),
        ],
        regions: vec![
            RegionMask {
                region: 0,
                target: RegionTarget::PhraseTokens(vec![sentence[0], sentence[1]]),
            },
            RegionMask {
                region: 2,
                target: RegionTarget::PhraseTokens(vec![sentence[6]]),
            },
        ],
        selected_links: vec![],
        forced_link: None,
    };
    let is_plan = MaskPlan {
        modality: MaskModality::Text,
        text: vec![
            mask(5, sentence[5], TextAction::Keep),
            mask(7, sentence[7], TextAction::Mask),
        ],
        ..MaskPlan::empty()
    };
    let view = |tokens: &[u32], plan: MaskPlan, itm_label| -> Result<View, GradCheckError> {
        Ok(View {
            input: FusedInput::build(tokens, &regions, &plan)?,
            plan,
            itm_label,
        })
    };
    Ok(Fixture {
        region_tag: view(&tags, rt_plan, None)?,
        region_phrase: view(&sentence, rn_plan, None)?,
        image_sentence: view(&sentence, is_plan, None)?,
        image_match: view(&sentence, MaskPlan::empty(), Some(1))?,
    })
}

fn losses(model: &FusionModel<f64>, f: &Fixture) -> Result<[f64; 8], GradCheckError> {
    let mut g = Graph::new(model.params());
    let l = example_losses(&mut g, model, f.views())?;
    let obj = l.objective(&mut g, OBJECTIVE_WEIGHT, 1.0)?;
    let b = l.bundle(&g);
    Ok([
        b.mlm_rt,
        b.mrc,
        b.mrfr,
        b.mlm_rp,
        b.p_mrtc,
        b.mlm_is,
        b.itm,
        g.scalar(obj),
    ])
}

/// Analytic gradients of each checked loss, indexed `[loss][param][coord]`.
fn analytic(model: &FusionModel<f64>, f: &Fixture) -> Result<Vec<Vec<Vec<f64>>>, GradCheckError> {
    let mut out = Vec::with_capacity(CHECKED_LOSSES.len());
    for k in 0..CHECKED_LOSSES.len() {
        let mut g = Graph::new(model.params());
        let l = example_losses(&mut g, model, f.views())?;
        let obj = l.objective(&mut g, OBJECTIVE_WEIGHT, 1.0)?;
        let parts = [
            l.mlm_rt, l.mrc, l.mrfr, l.mlm_rp, l.p_mrtc, l.mlm_is, l.itm, obj,
        ];
        let grads = g
            .backward(parts[k])
            .map_err(FusionError::from)?
            .into_param_grads(model.params());
        out.push(
            model
                .params()
                .ids()
                .map(|id| grads.get(id).to_vec())
                .collect(),
        );
    }
    Ok(out)
}

/// Compares analytic gradients of every head's loss and of the weighted
/// objective with five-point central differences in double precision.
///
/// Per parameter, half of the checked coordinates are those with the largest
/// objective gradient and half are uniform draws.
pub fn grad_check(
    config: &ModelConfig,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, GradCheckError> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut model = FusionModel::<f64>::new(config.clone(), opts.seed)?;
    let fix = fixture(config, &mut rng)?;
    let mut grads = analytic(&model, &fix)?;
    if let Some(name) = &opts.corrupt {
        let id = model
            .params()
            .find(name)
            .ok_or_else(|| GradCheckError::UnknownParam(name.clone()))?;
        for per_loss in &mut grads {
            per_loss[id.index()].iter_mut().for_each(|x| *x *= 1.5);
        }
    }
    let objective = CHECKED_LOSSES.len() - 1;
    let ids: Vec<_> = model.params().ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    let mut per_loss = vec![0.0f64; CHECKED_LOSSES.len()];
    for id in ids {
        let name = model.params().name(id).to_string();
        let n = model.params().get(id).numel();
        let half = opts.samples_per_param / 2;
        let mut by_size: Vec<usize> = (0..n).collect();
        let g_obj = &grads[objective][id.index()];
        by_size.sort_by(|&a, &b| g_obj[b].abs().total_cmp(&g_obj[a].abs()).then(a.cmp(&b)));
        let mut coords: Vec<usize> = by_size.into_iter().take(half.min(n)).collect();
        let draws = (opts.samples_per_param - coords.len()).min(n);
        coords.extend(sample(&mut rng, n, draws).into_iter());
        coords.sort_unstable();
        coords.dedup();

        let mut worst = (0.0f64, CHECKED_LOSSES[0]);
        for &j in &coords {
            let original = model.params().get(id).data()[j];
            let mut at = |delta: f64| -> Result<[f64; 8], GradCheckError> {
                model.params_mut().get_mut(id).data_mut()[j] = original + delta;
                losses(&model, &fix)
            };
            let h = opts.step;
            let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
            model.params_mut().get_mut(id).data_mut()[j] = original;
            for k in 0..CHECKED_LOSSES.len() {
                let numeric = (-p2[k] + 8.0 * p1[k] - 8.0 * m1[k] + m2[k]) / (12.0 * h);
                let a = grads[k][id.index()][j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
                per_loss[k] = per_loss[k].max(rel);
                if rel > worst.0 {
                    worst = (rel, CHECKED_LOSSES[k]);
                }
            }
        }
        params.push(ParamCheck {
            name,
            checked: coords.len(),
            max_rel_err: worst.0,
            worst_loss: worst.1,
        });
    }
    let max_rel_err = per_loss.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        params,
        losses: CHECKED_LOSSES.iter().copied().zip(per_loss).collect(),
        max_rel_err,
        elapsed: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            intermediate: 16,
            vocab_size: 24,
            feature_dim: 4,
            num_classes: 5,
            max_tokens: 12,
            max_regions: 4,
            modalities: 2,
            layer_norm_eps: 1e-5,
            init_std: 0.2,
        }
    }

    #[test]
    fn tiny_model_passes_and_lists_each_parameter_once() {
        let report = grad_check(&tiny(), &GradCheckOptions::default()).unwrap();
        assert!(report.passes(1e-4), "{:?}", report.losses);
        let model = FusionModel::<f64>::new(tiny(), 0).unwrap();
        let names: Vec<&str> = report.params.iter().map(|p| p.name.as_str()).collect();
        let expect: Vec<&str> = model.params().iter().map(|(_, n, _)| n).collect();
        assert_eq!(names, expect);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let opts = GradCheckOptions {
            corrupt: Some("layer1.ffn.in.weight".into()),
            ..GradCheckOptions::default()
        };
        let report = grad_check(&tiny(), &opts).unwrap();
        assert!(!report.passes(1e-4));
        let worst = report
            .params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .unwrap();
        assert_eq!(worst.name, "layer1.ffn.in.weight");
    }

    #[test]
    fn unknown_corrupt_target_is_error() {
        let opts = GradCheckOptions {
            corrupt: Some("nope".into()),
            ..GradCheckOptions::default()
        };
        assert!(matches!(
            grad_check(&tiny(), &opts),
            Err(GradCheckError::UnknownParam(_))
        ));
    }
}
