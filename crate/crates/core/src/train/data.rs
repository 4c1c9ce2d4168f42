use std::collections::HashMap;

use super::TrainError;
use crate::aligner::{tokenize, ImageId, RegionSet, Sentence, TextId, Vocab, WeakPair};
use crate::corpus::validate_pairs;

/// Images, sentences and weak pairs with token ids resolved once.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub images: Vec<RegionSet>,
    pub sentences: Vec<Sentence>,
    pub pairs: Vec<WeakPair>,
    pub vocab: Vocab,
    pub feature_dim: usize,
    pub num_classes: usize,
    image_index: HashMap<ImageId, usize>,
    text_index: HashMap<TextId, usize>,
    sentence_tokens: Vec<Vec<u32>>,
    tag_tokens: Vec<Vec<u32>>,
}

/// Word-level vocabulary over every sentence word and region tag.
pub fn build_vocab(images: &[RegionSet], sentences: &[Sentence]) -> Vocab {
    let words = sentences
        .iter()
        .flat_map(|s| s.words.iter().cloned())
        .chain(
            images
                .iter()
                .flat_map(|i| i.regions.iter().flat_map(|r| tokenize(&r.tag))),
        );
    Vocab::build(words)
}

impl TrainingData {
    /// Validates cross references. Without a vocabulary one is built from
    /// the data.
    pub fn new(
        images: Vec<RegionSet>,
        sentences: Vec<Sentence>,
        pairs: Vec<WeakPair>,
        feature_dim: usize,
        num_classes: usize,
        vocab: Option<Vocab>,
    ) -> Result<Self, TrainError> {
        if pairs.is_empty() {
            return Err(TrainError::Data("no training pairs".into()));
        }
        for img in &images {
            img.validate(feature_dim, num_classes)
                .map_err(|m| TrainError::Data(format!("image {}: {m}", img.id)))?;
        }
        validate_pairs(&pairs, &images, &sentences).map_err(TrainError::Data)?;
        let vocab = vocab.unwrap_or_else(|| build_vocab(&images, &sentences));
        let image_index = images.iter().enumerate().map(|(i, x)| (x.id, i)).collect();
        let text_index = sentences
            .iter()
            .enumerate()
            .map(|(i, x)| (x.id, i))
            .collect();
        let sentence_tokens = sentences.iter().map(|s| s.token_ids(&vocab)).collect();
        let tag_tokens = images
            .iter()
            .map(|img| {
                img.regions
                    .iter()
                    .flat_map(|r| vocab.encode(&tokenize(&r.tag)))
                    .collect()
            })
            .collect();
        Ok(Self {
            images,
            sentences,
            pairs,
            vocab,
            feature_dim,
            num_classes,
            image_index,
            text_index,
            sentence_tokens,
            tag_tokens,
        })
    }

    pub fn image(&self, id: ImageId) -> &RegionSet {
        &self.images[self.image_index[&id]]
    }

    pub fn sentence(&self, id: TextId) -> &Sentence {
        &self.sentences[self.text_index[&id]]
    }

    pub fn sentence_tokens(&self, id: TextId) -> &[u32] {
        &self.sentence_tokens[self.text_index[&id]]
    }

    pub fn tag_tokens(&self, id: ImageId) -> &[u32] {
        &self.tag_tokens[self.image_index[&id]]
    }
}
