use std::collections::BTreeMap;

use log::warn;
use rand::Rng;

use super::{AlignError, RegionSet, WeakPair, NUM_SPECIAL};

/// How a masked text position is corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextAction {
    Mask,
    Random(u32),
    Keep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextMask {
    /// Index into the text segment (specials excluded).
    pub position: usize,
    pub target: u32,
    pub action: TextAction,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RegionTarget {
    /// Region-tag masking: the class id `c(v)` and the original feature `r(v)`.
    ClassAndFeature { class_id: u32, feature: Vec<f32> },
    /// Region-phrase masking: the linked phrase's token ids.
    PhraseTokens(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    pub region: usize,
    pub target: RegionTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskModality {
    None,
    Text,
    Vision,
    Both,
}

/// Per-example masking decisions and recovery targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub modality: MaskModality,
    pub text: Vec<TextMask>,
    pub regions: Vec<RegionMask>,
    /// Links chosen by the proportional draw (region-phrase plans only).
    pub selected_links: Vec<usize>,
    /// Link masked by the at-least-one rule when the draw selected nothing.
    pub forced_link: Option<usize>,
}

impl MaskPlan {
    pub fn empty() -> Self {
        Self {
            modality: MaskModality::None,
            text: Vec::new(),
            regions: Vec::new(),
            selected_links: Vec::new(),
            forced_link: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty() && self.regions.is_empty()
    }

    fn with_modality(mut self) -> Self {
        self.modality = match (self.text.is_empty(), self.regions.is_empty()) {
            (true, true) => MaskModality::None,
            (false, true) => MaskModality::Text,
            (true, false) => MaskModality::Vision,
            (false, false) => MaskModality::Both,
        };
        self
    }

    /// Text tokens after corruption.
    pub fn apply_text(&self, tokens: &[u32], mask_id: u32) -> Vec<u32> {
        let mut out = tokens.to_vec();
        for m in &self.text {
            match m.action {
                TextAction::Mask => out[m.position] = mask_id,
                TextAction::Random(t) => out[m.position] = t,
                TextAction::Keep => {}
            }
        }
        out
    }

    /// Whether region `i` has its feature zeroed.
    pub fn region_masked(&self, i: usize) -> bool {
        self.regions.iter().any(|r| r.region == i)
    }
}

fn check_rate(rate: f64) -> Result<(), AlignError> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(AlignError::InvalidRate(rate))
    }
}

fn text_mlm<R: Rng + ?Sized>(
    tokens: &[u32],
    rate: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Vec<TextMask> {
    let mut out = Vec::new();
    for (position, &target) in tokens.iter().enumerate() {
        if rng.gen::<f64>() >= rate {
            continue;
        }
        let r: f64 = rng.gen();
        let action = if r < 0.8 {
            TextAction::Mask
        } else if r < 0.9 && vocab_size as u32 > NUM_SPECIAL {
            TextAction::Random(rng.gen_range(NUM_SPECIAL..vocab_size as u32))
        } else {
            TextAction::Keep
        };
        out.push(TextMask {
            position,
            target,
            action,
        });
    }
    out
}

/// Region-tag plan: each tag token and each region is masked independently
/// with probability `rate`. Tag tokens use 80/10/10 corruption; masked regions
/// have their feature zeroed and keep class and feature targets.
pub fn plan_rt_masks<R: Rng + ?Sized>(
    tag_tokens: &[u32],
    regions: &RegionSet,
    rate: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MaskPlan, AlignError> {
    check_rate(rate)?;
    let text = text_mlm(tag_tokens, rate, vocab_size, rng);
    let mut masked = Vec::new();
    for (i, r) in regions.regions.iter().enumerate() {
        if rng.gen::<f64>() < rate {
            masked.push(RegionMask {
                region: i,
                target: RegionTarget::ClassAndFeature {
                    class_id: r.class_id,
                    feature: r.feature.clone(),
                },
            });
        }
    }
    Ok(MaskPlan {
        text,
        regions: masked,
        ..MaskPlan::empty()
    }
    .with_modality())
}

/// Image-sentence plan: standard MLM over the sentence tokens.
pub fn plan_is_masks<R: Rng + ?Sized>(
    tokens: &[u32],
    rate: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MaskPlan, AlignError> {
    check_rate(rate)?;
    Ok(MaskPlan {
        text: text_mlm(tokens, rate, vocab_size, rng),
        ..MaskPlan::empty()
    }
    .with_modality())
}

/// Independent draw of each link with `p_i = min(1, rho · s_i / mean(s))`.
pub fn select_links<R: Rng + ?Sized>(scores: &[f32], rho: f64, rng: &mut R) -> Vec<usize> {
    if scores.is_empty() {
        return Vec::new();
    }
    let mean = scores.iter().map(|&s| s as f64).sum::<f64>() / scores.len() as f64;
    scores
        .iter()
        .enumerate()
        .filter_map(|(i, &s)| {
            let p = if mean > 0.0 {
                (rho * s as f64 / mean).min(1.0)
            } else {
                0.0
            };
            (rng.gen::<f64>() < p).then_some(i)
        })
        .collect()
}

/// Region-phrase plan. A fair coin picks the masked modality; links are drawn
/// by [`select_links`], and if none is drawn the highest-scoring link is
/// masked. Text side: every token of the selected phrases becomes `[MASK]`.
/// Vision side: selected regions are zeroed and must predict the tokens of
/// their linked phrases.
pub fn plan_rn_masks<R: Rng + ?Sized>(
    pair: &WeakPair,
    sentence_tokens: &[u32],
    regions: &RegionSet,
    rho: f64,
    rng: &mut R,
) -> Result<MaskPlan, AlignError> {
    if pair.links.is_empty() {
        return Err(AlignError::NoLinks);
    }
    for l in &pair.links {
        if l.region >= regions.len() {
            return Err(AlignError::BadRegion {
                region: l.region,
                count: regions.len(),
            });
        }
    }
    let text_side = rng.gen_bool(0.5);
    let scores: Vec<f32> = pair.links.iter().map(|l| l.score).collect();
    let selected_links = select_links(&scores, rho, rng);
    let mut forced_link = None;
    let chosen: Vec<usize> = if selected_links.is_empty() {
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        forced_link = Some(best);
        vec![best]
    } else {
        selected_links.clone()
    };

    let mut plan = MaskPlan {
        selected_links,
        forced_link,
        ..MaskPlan::empty()
    };
    if text_side {
        for &li in &chosen {
            for position in pair.links[li].span.positions() {
                plan.text.push(TextMask {
                    position,
                    target: sentence_tokens[position],
                    action: TextAction::Mask,
                });
            }
        }
        plan.text.sort_by_key(|m| m.position);
        plan.modality = MaskModality::Text;
    } else {
        let mut by_region: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
        for &li in &chosen {
            let link = &pair.links[li];
            by_region
                .entry(link.region)
                .or_default()
                .extend(link.span.positions().map(|p| sentence_tokens[p]));
        }
        plan.regions = by_region
            .into_iter()
            .map(|(region, tokens)| RegionMask {
                region,
                target: RegionTarget::PhraseTokens(tokens),
            })
            .collect();
        plan.modality = MaskModality::Vision;
    }
    Ok(plan)
}

/// Image-text matching assignment for one batch slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ItmSample {
    /// Batch index whose sentence is paired with this slot's image.
    pub text_from: usize,
    pub label: u8,
}

/// Keeps each pair as a positive with probability `1 - negative_prob`; otherwise
/// swaps in the sentence of another batch slot with a different image and a
/// different sentence, labelled 0.
pub fn sample_itm_pairs<R: Rng + ?Sized>(
    batch: &[WeakPair],
    negative_prob: f64,
    rng: &mut R,
) -> Vec<ItmSample> {
    if batch.len() < 2 {
        if !batch.is_empty() {
            warn!("batch of one: no in-batch negatives available");
        }
        return (0..batch.len())
            .map(|i| ItmSample {
                text_from: i,
                label: 1,
            })
            .collect();
    }
    (0..batch.len())
        .map(|i| {
            if !rng.gen_bool(negative_prob) {
                return ItmSample {
                    text_from: i,
                    label: 1,
                };
            }
            let own = &batch[i];
            let candidates: Vec<usize> = (0..batch.len())
                .filter(|&j| {
                    j != i && batch[j].image_id != own.image_id && batch[j].text_id != own.text_id
                })
                .collect();
            if candidates.is_empty() {
                ItmSample {
                    text_from: i,
                    label: 1,
                }
            } else {
                ItmSample {
                    text_from: candidates[rng.gen_range(0..candidates.len())],
                    label: 0,
                }
            }
        })
        .collect()
}
