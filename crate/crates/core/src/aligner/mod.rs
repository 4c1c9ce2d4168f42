//! Noun phrases, phrase-to-region links, and masking plans for the three
//! alignment granularities (region-tag, region-phrase, image-sentence).

mod linking;
mod masking;
mod text;
mod types;

pub use linking::{link_pairs, link_phrases, LinkReport};
pub use masking::{
    plan_is_masks, plan_rn_masks, plan_rt_masks, sample_itm_pairs, select_links, ItmSample,
    MaskModality, MaskPlan, RegionMask, RegionTarget, TextAction, TextMask,
};
pub use text::{
    extract_noun_phrases, tokenize, Lexicon, PosTag, Sentence, Vocab, CLS, MASK, NUM_SPECIAL, PAD,
    SEP, UNK,
};
pub use types::{BoundingBox, ImageId, Link, Region, RegionSet, Span, TextId, WeakPair};

use thiserror::Error;

use crate::embedder::EmbedError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("mask rate {0} outside [0, 1)")]
    InvalidRate(f64),
    #[error("region-phrase masking needs at least one link")]
    NoLinks,
    #[error("link references region {region} but the image has {count}")]
    BadRegion { region: usize, count: usize },
    #[error("unknown image id {0}")]
    UnknownImage(ImageId),
    #[error("unknown text id {0}")]
    UnknownText(TextId),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}
