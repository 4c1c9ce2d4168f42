use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CorpusError, TruthRecord};
use crate::aligner::WeakPair;

/// Pairs each image with a caption so that exactly `round(ratio · n)` images
/// keep their planted caption.
///
/// Images are shuffled; the prefix keeps its truth and the suffix receives a
/// derangement of the suffix's own captions. Every image and every caption
/// appears exactly once in the output, which is ordered like `truth`.
pub fn mix_alignment_ratio(
    truth: &[TruthRecord],
    ratio: f64,
    seed: u64,
) -> Result<Vec<WeakPair>, CorpusError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(CorpusError::Spec(format!("ratio {ratio} outside [0, 1]")));
    }
    let n = truth.len();
    let aligned = (ratio * n as f64).round() as usize;
    if n - aligned == 1 {
        return Err(CorpusError::Spec(
            "a single unaligned image cannot be paired with another image's caption".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let suffix = &order[aligned..];
    let mut shuffled = suffix.to_vec();
    // Rejection sampling gives a uniform derangement; expected ~e attempts.
    loop {
        shuffled.shuffle(&mut rng);
        if shuffled.iter().zip(suffix).all(|(a, b)| a != b) {
            break;
        }
    }
    let mut text_of: Vec<usize> = (0..n).collect();
    for (&img, &cap) in suffix.iter().zip(&shuffled) {
        text_of[img] = cap;
    }
    Ok(truth
        .iter()
        .enumerate()
        .map(|(i, t)| WeakPair {
            image_id: t.image_id,
            text_id: truth[text_of[i]].text_id,
            rank: 1,
            score: 0.0,
            links: Vec::new(),
            label: 1,
        })
        .collect())
}
