//! Text embedding providers and exhaustive cosine top-K retrieval.
//!
//! The weakly-aligned corpus is built by embedding each image's tag sequence
//! as a query and retrieving the K closest sentences from the text pool.
//! Retrieval is brute force: O(|texts| · dim) per query.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::time::SystemTime;

use log::warn;
use thiserror::Error;

use crate::aligner::{tokenize, ImageId, RegionSet, Sentence, TextId, WeakPair};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("cannot embed empty input")]
    EmptyInput,
    #[error("vector dimensions differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("cosine of a zero vector is undefined")]
    ZeroVector,
    #[error("K must be at least 1")]
    ZeroK,
}

/// Deterministic text → unit vector map of fixed dimension.
pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError>;
}

fn normalize(mut v: Vec<f64>) -> Vec<f32> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v.into_iter().map(|x| x as f32).collect()
}

/// Word counts over a fixed vocabulary, ℓ₂-normalized.
///
/// Words outside the vocabulary are ignored. Input with no known word maps to
/// a dedicated fallback axis so every non-empty input still has unit norm.
#[derive(Debug, Clone)]
pub struct BagOfWords {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

impl BagOfWords {
    pub fn new<I, S>(vocab: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut words: Vec<String> = vocab
            .into_iter()
            .map(|w| w.as_ref().to_lowercase())
            .collect();
        words.sort();
        words.dedup();
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self {
            vocab: words,
            index,
        }
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// Axis of a vocabulary word.
    pub fn axis(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }
}

impl EmbeddingProvider for BagOfWords {
    fn name(&self) -> &str {
        "bow"
    }

    fn dim(&self) -> usize {
        self.vocab.len() + 1
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        let words = tokenize(text);
        if words.is_empty() {
            return Err(EmbedError::EmptyInput);
        }
        let mut counts = vec![0.0f64; self.dim()];
        let mut known = false;
        for w in &words {
            if let Some(&i) = self.index.get(w) {
                counts[i] += 1.0;
                known = true;
            }
        }
        if !known {
            counts[self.vocab.len()] = 1.0;
        }
        Ok(normalize(counts))
    }
}

/// Feature-hashed word counts for open vocabularies (FNV-1a buckets).
#[derive(Debug, Clone, Copy)]
pub struct HashedBagOfWords {
    dim: usize,
}

impl HashedBagOfWords {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "hash dimension must be positive");
        Self { dim }
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl EmbeddingProvider for HashedBagOfWords {
    fn name(&self) -> &str {
        "hash"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        let words = tokenize(text);
        if words.is_empty() {
            return Err(EmbedError::EmptyInput);
        }
        let mut counts = vec![0.0f64; self.dim];
        for w in &words {
            counts[(fnv1a(w) % self.dim as u64) as usize] += 1.0;
        }
        Ok(normalize(counts))
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::DimMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Embeds an image's ordered object tags as one query string.
pub fn embed_tag_query<S: AsRef<str>>(
    provider: &dyn EmbeddingProvider,
    tags: &[S],
) -> Result<Vec<f32>, EmbedError> {
    if tags.is_empty() {
        return Err(EmbedError::EmptyInput);
    }
    let joined = tags.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ");
    provider.embed(&joined)
}

/// Immutable candidate embeddings for exhaustive search.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    ids: Vec<TextId>,
    dim: usize,
    embeddings: Vec<f32>,
    provider: String,
    built_at: SystemTime,
}

impl RetrievalIndex {
    pub fn build<'a, I>(provider: &dyn EmbeddingProvider, items: I) -> Result<Self, EmbedError>
    where
        I: IntoIterator<Item = (TextId, &'a str)>,
    {
        let dim = provider.dim();
        let mut ids = Vec::new();
        let mut embeddings = Vec::new();
        for (id, text) in items {
            ids.push(id);
            embeddings.extend(provider.embed(text)?);
        }
        Ok(Self {
            ids,
            dim,
            embeddings,
            provider: provider.name().to_string(),
            built_at: SystemTime::now(),
        })
    }

    pub fn from_embeddings(
        provider: &str,
        ids: Vec<TextId>,
        embeddings: Vec<Vec<f32>>,
    ) -> Result<Self, EmbedError> {
        let dim = embeddings.first().map_or(0, Vec::len);
        if let Some(bad) = embeddings.iter().find(|e| e.len() != dim) {
            return Err(EmbedError::DimMismatch(dim, bad.len()));
        }
        Ok(Self {
            ids,
            dim,
            embeddings: embeddings.into_iter().flatten().collect(),
            provider: provider.to_string(),
            built_at: SystemTime::now(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[TextId] {
        &self.ids
    }

    pub fn embedding(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn provider(&self) -> &str {
        &self.provider
    }

    pub fn built_at(&self) -> SystemTime {
        self.built_at
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub id: TextId,
    pub score: f64,
}

/// Descending score, then ascending id.
fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then(a.id.cmp(&b.id))
}

/// The `min(k, |index|)` best candidates by cosine with a unit query.
pub fn retrieve_topk(
    query: &[f32],
    index: &RetrievalIndex,
    k: usize,
) -> Result<Vec<Hit>, EmbedError> {
    if k == 0 {
        return Err(EmbedError::ZeroK);
    }
    if query.len() != index.dim {
        return Err(EmbedError::DimMismatch(query.len(), index.dim));
    }
    let mut hits: Vec<Hit> = (0..index.len())
        .map(|i| Hit {
            id: index.ids[i],
            score: index
                .embedding(i)
                .iter()
                .zip(query)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>()
                // folds -0.0 into +0.0 so ties compare equal
                + 0.0,
        })
        .collect();
    let k = k.min(hits.len());
    if k < hits.len() {
        hits.select_nth_unstable_by(k - 1, rank_order);
        hits.truncate(k);
    }
    hits.sort_by(rank_order);
    Ok(hits)
}

/// Images skipped during corpus construction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SkipReport {
    pub skipped: Vec<(ImageId, String)>,
}

/// Retrieves `k` sentences per image; pairs are ordered by image then rank and
/// carry no links yet.
pub fn build_weak_corpus(
    images: &[RegionSet],
    texts: &[Sentence],
    provider: &dyn EmbeddingProvider,
    k: usize,
) -> Result<(Vec<WeakPair>, SkipReport), EmbedError> {
    if k == 0 {
        return Err(EmbedError::ZeroK);
    }
    let index = RetrievalIndex::build(provider, texts.iter().map(|t| (t.id, t.text.as_str())))?;
    let mut pairs = Vec::with_capacity(images.len() * k);
    let mut report = SkipReport::default();
    for image in images {
        let tags = image.tags();
        let query = match embed_tag_query(provider, &tags) {
            Ok(q) => q,
            Err(e) => {
                warn!("skipping image {}: {e}", image.id);
                report.skipped.push((image.id, e.to_string()));
                continue;
            }
        };
        for (rank, hit) in retrieve_topk(&query, &index, k)?.into_iter().enumerate() {
            pairs.push(WeakPair {
                image_id: image.id,
                text_id: hit.id,
                rank: rank as u32 + 1,
                score: hit.score,
                links: Vec::new(),
                label: 1,
            });
        }
    }
    Ok((pairs, report))
}
