use std::path::Path;

use log::info;
use serde::Serialize;

use weakalign_core::aligner::{link_pairs, WeakPair};
use weakalign_core::corpus::{mix_alignment_ratio, read_images, read_texts, read_truth, ImageFile};
use weakalign_core::embedder::{build_weak_corpus, BagOfWords};
use weakalign_core::probe::{grounding_probe, itm_probe, ProbeSet};
use weakalign_core::train::{TrainConfig, Trainer, TrainingData};

use crate::commands::{load_probe_set, load_training_data, train_config, write_csv};
use crate::{CliError, KSweepArgs, RatioSweepArgs, WitmArgs};

struct Outcome {
    itm: f64,
    grounding: f64,
    total: f64,
}

fn train_and_probe(config: TrainConfig, data: &TrainingData, set: &ProbeSet, out: &Path) -> Result<Outcome, CliError> {
    let mut trainer = Trainer::new(config, data)?;
    let summary = trainer.run(out, None)?;
    let itm = itm_probe(trainer.model(), &data.vocab, set, 0)?;
    let grounding = grounding_probe(trainer.model(), &data.vocab, set)?;
    Ok(Outcome {
        itm: itm.accuracy,
        grounding: grounding.accuracy,
        total: summary.last.map_or(f64::NAN, |r| r.total),
    })
}

/// Training images, their sentences and a linker over the noun list.
struct World {
    images: ImageFile,
    sentences: Vec<weakalign_core::aligner::Sentence>,
    provider: BagOfWords,
}

fn read_world(dir: &Path) -> Result<World, CliError> {
    let images = read_images(&dir.join("images.jsonl"))?;
    let texts = read_texts(&dir.join("texts.jsonl"))?;
    if texts.nouns.is_empty() {
        return Err(CliError::Validation(format!("{}: texts.jsonl has no noun list", dir.display())));
    }
    Ok(World {
        sentences: texts.sentences(),
        provider: BagOfWords::new(&texts.nouns),
        images,
    })
}

impl World {
    fn data(&self, mut pairs: Vec<WeakPair>) -> Result<TrainingData, CliError> {
        link_pairs(&mut pairs, &self.images.images, &self.sentences, &self.provider)
            .map_err(|e| CliError::Validation(e.to_string()))?;
        Ok(TrainingData::new(
            self.images.images.clone(),
            self.sentences.clone(),
            pairs,
            self.images.feature_dim,
            self.images.classes.len(),
            None,
        )?)
    }
}

#[derive(Debug, Serialize)]
struct KRow {
    k: usize,
    pairs: usize,
    itm_accuracy: f64,
    grounding_accuracy: f64,
    final_total: f64,
}

/// Retrieves K captions per image for each K, pretrains and probes.
pub fn k_sweep(a: &KSweepArgs) -> Result<(), CliError> {
    let config = train_config(&a.train)?;
    let world = read_world(&a.data)?;
    let set = load_probe_set(&a.data.join("heldout"))?;
    let mut rows = Vec::new();
    for &k in &a.ks {
        if k < 1 {
            return Err(CliError::Validation("K must be at least 1".into()));
        }
        let (pairs, _) = build_weak_corpus(&world.images.images, &world.sentences, &world.provider, k)?;
        let n = pairs.len();
        let data = world.data(pairs)?;
        let o = train_and_probe(config.clone(), &data, &set, &a.out.join(format!("k-{k}")))?;
        info!("K = {k}: itm {:.3} grounding {:.3}", o.itm, o.grounding);
        rows.push(KRow {
            k,
            pairs: n,
            itm_accuracy: o.itm,
            grounding_accuracy: o.grounding,
            final_total: o.total,
        });
    }
    write_csv(&a.out.join("k-sweep.csv"), &rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct RatioRow {
    pub ratio: f64,
    pub seed: u64,
    pub itm_accuracy: f64,
    pub grounding_accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrendCheck {
    /// `(ratio, median matching accuracy)` in ascending ratio order.
    pub medians: Vec<(f64, f64)>,
    pub non_decreasing: bool,
    /// Median at the largest ratio minus median at the smallest.
    pub gain: f64,
    pub holds: bool,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

impl TrendCheck {
    pub fn new(rows: &[RatioRow], min_gain: f64) -> Self {
        let mut ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
        ratios.sort_by(f64::total_cmp);
        ratios.dedup();
        let medians: Vec<(f64, f64)> = ratios
            .iter()
            .map(|&q| {
                let accs = rows.iter().filter(|r| r.ratio == q).map(|r| r.itm_accuracy).collect();
                (q, median(accs))
            })
            .collect();
        let non_decreasing = medians.windows(2).all(|w| w[1].1 >= w[0].1);
        let gain = match (medians.first(), medians.last()) {
            (Some(a), Some(b)) => b.1 - a.1,
            _ => 0.0,
        };
        Self {
            holds: non_decreasing && gain >= min_gain,
            medians,
            non_decreasing,
            gain,
        }
    }
}

/// Pairs every training image with one caption, a `ratio` fraction of them
/// correctly, then pretrains and probes for each seed.
pub fn ratio_sweep(a: &RatioSweepArgs) -> Result<(Vec<RatioRow>, TrendCheck), CliError> {
    let base = train_config(&a.train)?;
    if a.ratios.is_empty() || a.seeds.is_empty() {
        return Err(CliError::Validation("need at least one ratio and one seed".into()));
    }
    let world = read_world(&a.data)?;
    let truth = read_truth(&a.data.join("truth.jsonl"))?;
    let set = load_probe_set(&a.data.join("heldout"))?;
    let mut rows = Vec::new();
    for &ratio in &a.ratios {
        for &seed in &a.seeds {
            let pairs = mix_alignment_ratio(&truth, ratio, seed)?;
            let data = world.data(pairs)?;
            let config = TrainConfig { seed, ..base.clone() };
            let out = a.out.join(format!("ratio-{ratio}")).join(format!("seed-{seed}"));
            let o = train_and_probe(config, &data, &set, &out)?;
            info!("ratio {ratio} seed {seed}: itm {:.3}", o.itm);
            rows.push(RatioRow {
                ratio,
                seed,
                itm_accuracy: o.itm,
                grounding_accuracy: o.grounding,
            });
        }
    }
    let trend = TrendCheck::new(&rows, a.min_gain);
    write_csv(&a.out.join("ratio-sweep.csv"), &rows)?;
    let summary = serde_json::to_string_pretty(&trend).expect("trend serializes");
    let path = a.out.join("ratio-trend.json");
    std::fs::write(&path, summary + "\n").map_err(|e| crate::io_error(&path, e))?;
    for (q, m) in &trend.medians {
        println!("ratio {q}: median itm accuracy {m:.4}");
    }
    println!("non-decreasing {} gain {:.4}", trend.non_decreasing, trend.gain);
    if a.require_trend && !trend.holds {
        return Err(CliError::Threshold(format!(
            "trend does not hold: non-decreasing {}, gain {:.4} (need {})",
            trend.non_decreasing, trend.gain, a.min_gain
        )));
    }
    Ok((rows, trend))
}

#[derive(Debug, Serialize)]
struct WitmRow {
    weighted_itm: bool,
    itm_accuracy: f64,
    grounding_accuracy: f64,
    final_total: f64,
}

/// Trains the same corpus with and without the match-score weighting.
pub fn witm_ablation(a: &WitmArgs) -> Result<(), CliError> {
    let base = train_config(&a.train)?;
    let data = load_training_data(&a.data, &a.data.join("pairs.jsonl"), None)?;
    let set = load_probe_set(&a.data.join("heldout"))?;
    let mut rows = Vec::new();
    for weighted_itm in [true, false] {
        let config = TrainConfig {
            weighted_itm,
            ..base.clone()
        };
        let arm = if weighted_itm { "weighted" } else { "unweighted" };
        let o = train_and_probe(config, &data, &set, &a.out.join(arm))?;
        info!("{arm}: itm {:.3} grounding {:.3}", o.itm, o.grounding);
        rows.push(WitmRow {
            weighted_itm,
            itm_accuracy: o.itm,
            grounding_accuracy: o.grounding,
            final_total: o.total,
        });
    }
    write_csv(&a.out.join("witm-ablation.csv"), &rows)
}
