use std::collections::HashMap;
use std::fmt::Write;

use super::{AlignError, ImageId, Link, RegionSet, Sentence, TextId, WeakPair};
use crate::embedder::{cosine, EmbeddingProvider};

/// Links each noun phrase to its most similar region tag.
///
/// Ties go to the lowest region index. Scores are floored at zero and links
/// with score zero are dropped, so every returned score lies in `(0, 1]`.
pub fn link_phrases(
    sentence: &Sentence,
    regions: &RegionSet,
    embedder: &dyn EmbeddingProvider,
) -> Result<Vec<Link>, AlignError> {
    if sentence.spans.is_empty() || regions.is_empty() {
        return Ok(Vec::new());
    }
    let tag_embeddings = regions
        .regions
        .iter()
        .map(|r| embedder.embed(&r.tag))
        .collect::<Result<Vec<_>, _>>()?;
    let mut links = Vec::new();
    for &span in &sentence.spans {
        let phrase = embedder.embed(&sentence.phrase(span))?;
        let mut best: Option<(usize, f64)> = None;
        for (i, tag) in tag_embeddings.iter().enumerate() {
            let c = cosine(&phrase, tag)?;
            if best.map_or(true, |(_, b)| c > b) {
                best = Some((i, c));
            }
        }
        if let Some((region, c)) = best {
            let score = c.max(0.0) as f32;
            if score > 0.0 {
                links.push(Link {
                    span,
                    region,
                    score,
                });
            }
        }
    }
    Ok(links)
}

/// Fills in the links of every pair and reports link quality.
pub fn link_pairs(
    pairs: &mut [WeakPair],
    images: &[RegionSet],
    sentences: &[Sentence],
    embedder: &dyn EmbeddingProvider,
) -> Result<LinkReport, AlignError> {
    let images: HashMap<ImageId, &RegionSet> = images.iter().map(|i| (i.id, i)).collect();
    let sentences: HashMap<TextId, &Sentence> = sentences.iter().map(|s| (s.id, s)).collect();
    let mut report = LinkReport::default();
    for pair in pairs {
        let image = images
            .get(&pair.image_id)
            .ok_or(AlignError::UnknownImage(pair.image_id))?;
        let sentence = sentences
            .get(&pair.text_id)
            .ok_or(AlignError::UnknownText(pair.text_id))?;
        pair.links = link_phrases(sentence, image, embedder)?;
        report.record(sentence, &pair.links);
    }
    Ok(report)
}

/// Aggregate link quality over a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkReport {
    pub phrases: usize,
    pub linked: usize,
    /// Counts of link scores in ten equal bins over `(0, 1]`.
    pub histogram: [usize; 10],
}

impl Default for LinkReport {
    fn default() -> Self {
        Self {
            phrases: 0,
            linked: 0,
            histogram: [0; 10],
        }
    }
}

impl LinkReport {
    pub fn record(&mut self, sentence: &Sentence, links: &[Link]) {
        self.phrases += sentence.spans.len();
        self.linked += links.len();
        for l in links {
            let bin = ((l.score * 10.0).ceil() as usize).clamp(1, 10) - 1;
            self.histogram[bin] += 1;
        }
    }

    pub fn coverage(&self) -> f64 {
        if self.phrases == 0 {
            0.0
        } else {
            self.linked as f64 / self.phrases as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let _ = writeln!(out, "phrases,{}", self.phrases);
        let _ = writeln!(out, "linked,{}", self.linked);
        let _ = writeln!(out, "coverage,{}", self.coverage());
        for (i, c) in self.histogram.iter().enumerate() {
            let _ = writeln!(
                out,
                "score_bin_{:.1}_{:.1},{c}",
                i as f64 / 10.0,
                (i + 1) as f64 / 10.0
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aligner::{BoundingBox, Lexicon, Region};
    use crate::embedder::BagOfWords;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn regions(tags: &[&str]) -> RegionSet {
        RegionSet {
            id: 0,
            width: 10.0,
            height: 10.0,
            regions: tags
                .iter()
                .enumerate()
                .map(|(i, t)| Region {
                    feature: vec![0.0; 2],
                    bbox: BoundingBox::new(0.0, 0.0, 5.0, 5.0),
                    tag: t.to_string(),
                    class_id: i as u32,
                    confidence: 1.0,
                })
                .collect(),
        }
    }

    #[test]
    fn link_pairs_fills_links_and_counts() {
        let emb = BagOfWords::new(["dog", "couch", "cat"]);
        let s = Sentence::parse(7, "the dog near a couch", &Lexicon::builtin());
        let mut pairs = vec![WeakPair {
            image_id: 0,
            text_id: 7,
            rank: 1,
            score: 1.0,
            links: vec![],
            label: 1,
        }];
        let report = link_pairs(
            &mut pairs,
            &[regions(&["couch", "dog"])],
            &[s.clone()],
            &emb,
        )
        .unwrap();
        assert_eq!(pairs[0].links.len(), 2);
        assert_eq!(
            (report.phrases, report.linked, report.histogram[9]),
            (2, 2, 2)
        );
        pairs[0].text_id = 8;
        assert_eq!(
            link_pairs(&mut pairs, &[regions(&["dog"])], &[s], &emb),
            Err(AlignError::UnknownText(8))
        );
    }

    #[test]
    fn exact_tag_match_links_with_score_one() {
        let emb = BagOfWords::new(["dog", "couch", "cat"]);
        let s = Sentence::parse(0, "the dog", &Lexicon::builtin());
        let links = link_phrases(&s, &regions(&["couch", "dog"]), &emb).unwrap();
        assert_eq!(links.len(), 1);
        assert_eq!(links[0].region, 1);
        assert_eq!(links[0].score, 1.0);
    }

    #[test]
    fn no_overlap_drops_link() {
        let emb = BagOfWords::new(["dog", "couch", "cat"]);
        let s = Sentence::parse(0, "a red car", &Lexicon::builtin());
        assert!(link_phrases(&s, &regions(&["couch", "dog"]), &emb)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn sentence_without_phrases_has_no_links() {
        let emb = BagOfWords::new(["dog"]);
        let s = Sentence::parse(0, "run quickly", &Lexicon::builtin());
        assert!(link_phrases(&s, &regions(&["dog"]), &emb)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn argmax_matches_brute_force() {
        let words = ["dog", "cat", "couch", "tree", "car", "red", "young"];
        let lex = Lexicon::builtin();
        let emb = BagOfWords::new(words);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let ntags = rng.gen_range(1..5);
            let tags: Vec<String> = (0..ntags)
                .map(|_| {
                    let a = words[rng.gen_range(0..words.len())];
                    if rng.gen_bool(0.3) {
                        format!("{} {}", words[rng.gen_range(0..words.len())], a)
                    } else {
                        a.to_string()
                    }
                })
                .collect();
            let tag_refs: Vec<&str> = tags.iter().map(String::as_str).collect();
            let rs = regions(&tag_refs);
            let text: Vec<&str> = (0..rng.gen_range(1..8))
                .map(|_| {
                    [
                        "the", "a", "dog", "cat", "red", "young", "couch", "sat", "tree", "car",
                    ][rng.gen_range(0..10)]
                })
                .collect();
            let s = Sentence::parse(0, &text.join(" "), &lex);
            let links = link_phrases(&s, &rs, &emb).unwrap();
            let mut expected = Vec::new();
            for &span in &s.spans {
                let p = emb.embed(&s.phrase(span)).unwrap();
                let scores: Vec<f64> = rs
                    .regions
                    .iter()
                    .map(|r| cosine(&p, &emb.embed(&r.tag).unwrap()).unwrap())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let region = scores.iter().position(|&x| x == max).unwrap();
                if max > 0.0 {
                    expected.push((span, region));
                }
            }
            let got: Vec<_> = links.iter().map(|l| (l.span, l.region)).collect();
            assert_eq!(got, expected);
            assert!(links.iter().all(|l| l.score > 0.0 && l.score <= 1.0));
        }
    }

    #[test]
    fn report_counts_and_bins() {
        let emb = BagOfWords::new(["dog", "couch"]);
        let s = Sentence::parse(0, "the dog near a red car", &Lexicon::builtin());
        let links = link_phrases(&s, &regions(&["dog"]), &emb).unwrap();
        let mut rep = LinkReport::default();
        rep.record(&s, &links);
        assert_eq!((rep.phrases, rep.linked), (2, 1));
        assert_eq!(rep.histogram[9], 1);
        assert!(rep.to_csv().contains("coverage,0.5"));
    }
}
