//! Weakly-aligned vision-language pre-training without parallel data.
//!
//! The pipeline: build an image-text corpus by tag-query retrieval
//! ([`embedder`]), link noun phrases to regions and plan masks ([`aligner`]),
//! run a single-stream fusion transformer ([`fusion`]) trained on
//! multi-granular objectives under a weighted curriculum ([`objectives`],
//! [`train`]). [`corpus`] holds the synthetic planted world and file formats.

pub mod aligner;
pub mod corpus;
pub mod embedder;
pub mod fusion;
pub mod gradcheck;
pub mod numkernel;
pub mod objectives;
pub mod probe;
pub mod train;
