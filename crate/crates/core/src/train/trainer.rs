use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;

use super::rng::{self, stream};
use super::{
    append_metrics, read_metrics, write_metrics, MetricsRow, TrainConfig, TrainError, TrainingData,
};
use crate::aligner::{
    plan_is_masks, plan_rn_masks, plan_rt_masks, sample_itm_pairs, MaskPlan, WeakPair,
};
use crate::corpus::{save_checkpoint, Checkpoint, CheckpointMeta, RngState};
use crate::fusion::{FusedInput, FusionModel};
use crate::numkernel::{Adam, Graph, ParamGrads};
use crate::objectives::{
    compute_w_itm, curriculum_total, example_losses, CurriculumState, ExampleViews, Schedule, View,
};

/// Which granularities a step trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Active {
    region_tag: bool,
    region_phrase: bool,
    image_sentence: bool,
}

/// Seeded, resumable pre-training loop.
pub struct Trainer<'d> {
    config: TrainConfig,
    data: &'d TrainingData,
    model: FusionModel<f32>,
    adam: Adam<f32>,
    step: u64,
    steps_per_epoch: u64,
    order: Option<(u64, Vec<usize>)>,
}

impl Active {
    /// Whether any weighted bundle is trained.
    fn weighted(&self) -> bool {
        self.region_phrase || self.image_sentence
    }
}

impl<'d> Trainer<'d> {
    pub fn new(config: TrainConfig, data: &'d TrainingData) -> Result<Self, TrainError> {
        config.validate()?;
        let model_config =
            config.model_config(data.vocab.len(), data.feature_dim, data.num_classes);
        let model = FusionModel::new(model_config, rng::derive_seed(config.seed, rng::INIT, 0, 0))?;
        let steps_per_epoch = data.pairs.len().div_ceil(config.batch_size) as u64;
        let adam = Adam::new(config.adam(steps_per_epoch * config.epochs), model.params());
        Ok(Self {
            config,
            data,
            model,
            adam,
            step: 0,
            steps_per_epoch,
            order: None,
        })
    }

    /// Continues from a checkpoint. The configuration, model shape and
    /// vocabulary must match the ones the checkpoint was written with.
    pub fn resume(
        config: TrainConfig,
        data: &'d TrainingData,
        checkpoint: Checkpoint,
    ) -> Result<Self, TrainError> {
        let mut t = Self::new(config, data)?;
        let m = &checkpoint.manifest;
        let ours =
            serde_json::to_value(&t.config).map_err(|e| TrainError::Config(e.to_string()))?;
        if let Some(field) = first_json_difference(&ours, &m.config) {
            return Err(TrainError::ConfigMismatch(field));
        }
        if let Some(field) = t.model.config().first_difference(&m.model) {
            return Err(TrainError::ConfigMismatch(field.to_string()));
        }
        if m.vocab != data.vocab.tokens() {
            return Err(TrainError::ConfigMismatch("vocab".into()));
        }
        t.model = FusionModel::from_params(m.model.clone(), checkpoint.params)?;
        t.adam = checkpoint.adam;
        if t.adam.config() != &t.config.adam(t.total_steps()) {
            return Err(TrainError::ConfigMismatch("optimizer".into()));
        }
        t.step = m.step;
        Ok(t)
    }

    pub fn model(&self) -> &FusionModel<f32> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch * self.config.epochs
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps()
    }

    fn epoch_order(&mut self, epoch: u64) -> &[usize] {
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.data.pairs.len()).collect();
            order.shuffle(&mut stream(self.config.seed, rng::SHUFFLE, epoch, 0));
            self.order = Some((epoch, order));
        }
        &self.order.as_ref().expect("just set").1
    }

    fn active(&self) -> Active {
        match self.config.schedule {
            Schedule::Sum => Active {
                region_tag: true,
                region_phrase: true,
                image_sentence: true,
            },
            Schedule::RoundRobin => {
                let k = self.step % 3;
                Active {
                    region_tag: k == 0,
                    region_phrase: k == 1,
                    image_sentence: k == 2,
                }
            }
        }
    }

    /// Runs one optimizer step and returns its metrics row.
    pub fn train_step(&mut self) -> Result<MetricsRow, TrainError> {
        if self.is_finished() {
            return Err(TrainError::Finished(self.step));
        }
        let c = self.config.clone();
        let step = self.step;
        let epoch = step / self.steps_per_epoch;
        let b = (step % self.steps_per_epoch) as usize;
        let data = self.data;
        let batch: Vec<WeakPair> = {
            let order = self.epoch_order(epoch);
            let end = ((b + 1) * c.batch_size).min(order.len());
            order[b * c.batch_size..end]
                .iter()
                .map(|&i| data.pairs[i].clone())
                .collect()
        };
        let active = self.active();
        let state = CurriculumState {
            epoch,
            warmup_epochs: c.warmup_epochs,
            weighted: c.weighted_itm,
        };
        let itm = sample_itm_pairs(
            &batch,
            c.itm_negative_prob,
            &mut stream(c.seed, rng::ITM, step, 0),
        );
        let vocab_size = data.vocab.len();
        let scale = 1.0 / batch.len() as f32;
        let mut grads = ParamGrads::zeros_like(self.model.params());
        let mut bundles = Vec::with_capacity(batch.len());
        let mut weights = Vec::with_capacity(batch.len());
        for (i, pair) in batch.iter().enumerate() {
            let mut rng = stream(c.seed, rng::EXAMPLE, step, i as u64);
            let image = data.image(pair.image_id);
            let text = data.sentence_tokens(pair.text_id);

            let region_tag = if active.region_tag {
                let tags = data.tag_tokens(pair.image_id);
                let plan = plan_rt_masks(tags, image, c.mask_rate, vocab_size, &mut rng)?;
                Some(View {
                    input: FusedInput::build(tags, image, &plan)?,
                    plan,
                    itm_label: None,
                })
            } else {
                None
            };
            let region_phrase = if active.region_phrase && !pair.links.is_empty() {
                let plan = plan_rn_masks(pair, text, image, c.link_mask_rate, &mut rng)?;
                Some(View {
                    input: FusedInput::build(text, image, &plan)?,
                    plan,
                    itm_label: None,
                })
            } else {
                None
            };
            let (image_sentence, image_match) = if active.image_sentence {
                let sample = itm[i];
                let shown = data.sentence_tokens(batch[sample.text_from].text_id);
                // Sentence recovery only on matched pairs.
                let sentence = if sample.label == 1 {
                    let plan = plan_is_masks(shown, c.mask_rate, vocab_size, &mut rng)?;
                    Some(View {
                        input: FusedInput::build(shown, image, &plan)?,
                        plan,
                        itm_label: None,
                    })
                } else {
                    None
                };
                let matching = View {
                    input: FusedInput::build(shown, image, &MaskPlan::empty())?,
                    plan: MaskPlan::empty(),
                    itm_label: Some(sample.label),
                };
                (sentence, Some(matching))
            } else {
                (None, None)
            };

            let w = if state.needs_weight() && active.weighted() {
                let clean = FusedInput::build(text, image, &MaskPlan::empty())?;
                Some(compute_w_itm(&self.model, &clean)?)
            } else {
                None
            };
            let coefficient = state.coefficient(w.map(f64::from))?;

            let mut g = Graph::new(self.model.params());
            let views = ExampleViews {
                region_tag: region_tag.as_ref(),
                region_phrase: region_phrase.as_ref(),
                image_sentence: image_sentence.as_ref(),
                image_match: image_match.as_ref(),
            };
            let losses = example_losses(&mut g, &self.model, views)?;
            bundles.push(losses.bundle(&g));
            weights.push(w.map(f64::from));
            let objective = losses.objective(&mut g, coefficient as f32, scale)?;
            grads.add_assign(&g.backward(objective)?.into_param_grads(self.model.params()));
        }
        let lr = self.adam.step(self.model.params_mut(), &grads);
        self.step += 1;
        let summary = curriculum_total(&bundles, &weights, &state)?;
        Ok(MetricsRow::new(self.step, epoch, lr, &summary))
    }

    pub fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            model: self.model.config().clone(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            step: self.step,
            epoch: self.step / self.steps_per_epoch,
            rng: RngState {
                seed: self.config.seed,
                counters: BTreeMap::from([
                    ("step".to_string(), self.step),
                    ("epoch".to_string(), self.step / self.steps_per_epoch),
                ]),
            },
            vocab: self.data.vocab.tokens().to_vec(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        save_checkpoint(
            dir,
            &self.checkpoint_meta(),
            self.model.params(),
            &self.adam,
        )?;
        Ok(())
    }

    /// Trains until the schedule ends or `stop_at` steps have completed,
    /// appending to `out/metrics.csv`. A checkpoint is written to
    /// `out/checkpoints/epoch-N` at every epoch boundary and to
    /// `out/checkpoint` when the run stops.
    pub fn run(&mut self, out: &Path, stop_at: Option<u64>) -> Result<RunSummary, TrainError> {
        std::fs::create_dir_all(out)
            .map_err(|e| TrainError::Io(format!("{}: {e}", out.display())))?;
        let metrics = out.join("metrics.csv");
        if self.step == 0 || !metrics.exists() {
            write_metrics(&metrics, &[])?;
        } else {
            // Drop rows written after the checkpoint being resumed.
            let rows: Vec<MetricsRow> = read_metrics(&metrics)?
                .into_iter()
                .filter(|r| r.step <= self.step)
                .collect();
            write_metrics(&metrics, &rows)?;
        }
        let stop = stop_at.unwrap_or(u64::MAX).min(self.total_steps());
        let mut last = None;
        while self.step < stop {
            let row = self.train_step()?;
            append_metrics(&metrics, &row)?;
            if self.step % self.steps_per_epoch == 0 {
                let epoch = self.step / self.steps_per_epoch;
                info!(
                    "epoch {epoch} done at step {}: total {:.4}",
                    self.step, row.total
                );
                self.save(&out.join("checkpoints").join(format!("epoch-{epoch}")))?;
            }
            last = Some(row);
        }
        let checkpoint = out.join("checkpoint");
        self.save(&checkpoint)?;
        Ok(RunSummary {
            steps: self.step,
            last,
            checkpoint,
            metrics,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps: u64,
    pub last: Option<MetricsRow>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

fn first_json_difference(a: &serde_json::Value, b: &serde_json::Value) -> Option<String> {
    match (a.as_object(), b.as_object()) {
        (Some(x), Some(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.into_iter().find(|k| x.get(*k) != y.get(*k)).cloned()
        }
        _ => (a != b).then(|| "config".to_string()),
    }
}
