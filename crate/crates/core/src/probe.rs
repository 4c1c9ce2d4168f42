//! Held-out probes: matched-vs-shuffled image-text matching and phrase
//! grounding through text-to-region attention.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::aligner::{MaskPlan, RegionSet, Sentence, Vocab};
use crate::corpus::TruthRecord;
use crate::fusion::{attention_probe, FusedInput, FusionError, FusionModel};
use crate::numkernel::Real;
use crate::train::rng::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeReport {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    /// Expected accuracy of an uninformed predictor.
    pub chance: f64,
}

impl ProbeReport {
    fn new(correct: usize, total: usize, chance: f64) -> Self {
        Self {
            correct,
            total,
            accuracy: if total == 0 {
                0.0
            } else {
                correct as f64 / total as f64
            },
            chance,
        }
    }
}

/// Held-out images, their planted captions and phrase-region truth.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub images: Vec<RegionSet>,
    pub sentences: Vec<Sentence>,
    pub truth: Vec<TruthRecord>,
}

impl ProbeSet {
    fn image(&self, t: &TruthRecord) -> &RegionSet {
        self.images
            .iter()
            .find(|i| i.id == t.image_id)
            .expect("truth references a probe image")
    }

    fn sentence(&self, t: &TruthRecord) -> &Sentence {
        self.sentences
            .iter()
            .find(|s| s.id == t.text_id)
            .expect("truth references a probe sentence")
    }

    pub fn validate(&self) -> Result<(), String> {
        for (i, t) in self.truth.iter().enumerate() {
            if !self.images.iter().any(|x| x.id == t.image_id) {
                return Err(format!("truth[{i}].image_id: unknown image {}", t.image_id));
            }
            if !self.sentences.iter().any(|x| x.id == t.text_id) {
                return Err(format!("truth[{i}].text_id: unknown text {}", t.text_id));
            }
        }
        if self.truth.len() < 2 {
            return Err("need at least two probe images".into());
        }
        Ok(())
    }
}

/// Each image is scored against its own caption and against the caption of
/// another image (a seeded derangement). A prediction is correct when
/// `s > 0` exactly for the matched pair.
pub fn itm_probe<T: Real>(
    model: &FusionModel<T>,
    vocab: &Vocab,
    set: &ProbeSet,
    seed: u64,
) -> Result<ProbeReport, FusionError> {
    let n = set.truth.len();
    let mut rng = stream(seed, rng::PROBE, 0, 0);
    let mut other: Vec<usize> = (0..n).collect();
    loop {
        other.shuffle(&mut rng);
        if other.iter().enumerate().all(|(i, &j)| i != j) {
            break;
        }
    }
    let mut correct = 0;
    for (i, t) in set.truth.iter().enumerate() {
        let image = set.image(t);
        for (text, label) in [
            (set.sentence(t), true),
            (set.sentence(&set.truth[other[i]]), false),
        ] {
            let input = FusedInput::build(&text.token_ids(vocab), image, &MaskPlan::empty())?;
            let s = model.itm_logit(&input)?.as_f64();
            if (s > 0.0) == label {
                correct += 1;
            }
        }
    }
    Ok(ProbeReport::new(correct, 2 * n, 0.5))
}

/// For every planted phrase, the region with the highest head-averaged
/// last-layer attention from the phrase's tokens is compared with the
/// planted region.
pub fn grounding_probe<T: Real>(
    model: &FusionModel<T>,
    vocab: &Vocab,
    set: &ProbeSet,
) -> Result<ProbeReport, FusionError> {
    let last = model.config().layers - 1;
    let mut correct = 0;
    let mut total = 0;
    let mut chance = 0.0;
    for t in &set.truth {
        let image = set.image(t);
        let sentence = set.sentence(t);
        let input = FusedInput::build(&sentence.token_ids(vocab), image, &MaskPlan::empty())?;
        let maps = attention_probe(model, &input)?;
        for p in &t.phrases {
            let positions: Vec<usize> =
                p.span.positions().map(|w| input.word_position(w)).collect();
            if maps.attended_region(last, &positions) == Some(p.region) {
                correct += 1;
            }
            total += 1;
            chance += 1.0 / image.len() as f64;
        }
    }
    let chance = if total == 0 {
        0.0
    } else {
        chance / total as f64
    };
    Ok(ProbeReport::new(correct, total, chance))
}
