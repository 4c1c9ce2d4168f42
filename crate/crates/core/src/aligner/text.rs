//! Word-level tokenizer, vocabulary, lexicon tagger and noun-phrase chunker.

use std::collections::{BTreeSet, HashMap};

use super::types::{Span, TextId};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_SPECIAL: u32 = 5;

const SPECIALS: [&str; NUM_SPECIAL as usize] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Lowercased alphanumeric word runs; punctuation is dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Token vocabulary: the five specials followed by words in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn build<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let words: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_lowercase())
            .filter(|w| !SPECIALS.contains(&w.as_str()))
            .collect();
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from a saved token list (specials included).
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<u32> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PosTag {
    Det,
    Adj,
    Noun,
    Other,
}

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "some", "his", "her", "its", "their", "my",
    "your", "our", "each", "every", "another", "two", "three", "several",
];

const BUILTIN_NOUNS: &[&str] = &[
    "woman", "man", "girl", "boy", "child", "person", "people", "dog", "cat", "horse", "bird",
    "couch", "sofa", "chair", "table", "bed", "car", "bus", "bike", "tree", "beach", "street",
    "house", "window", "door", "cup", "plate", "book", "phone", "ball", "hat", "shirt",
];

const BUILTIN_ADJECTIVES: &[&str] = &[
    "young", "old", "red", "blue", "green", "yellow", "black", "white", "small", "big", "large",
    "little", "tall", "short", "happy", "wooden", "bright", "dark",
];

/// Closed-class determiners plus open noun and adjective word lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    nouns: BTreeSet<String>,
    adjectives: BTreeSet<String>,
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Lexicon {
    pub fn builtin() -> Self {
        Self {
            nouns: BUILTIN_NOUNS.iter().map(|s| s.to_string()).collect(),
            adjectives: BUILTIN_ADJECTIVES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn with_nouns<I: IntoIterator<Item = S>, S: AsRef<str>>(mut self, nouns: I) -> Self {
        self.nouns
            .extend(nouns.into_iter().map(|s| s.as_ref().to_lowercase()));
        self
    }

    pub fn with_adjectives<I: IntoIterator<Item = S>, S: AsRef<str>>(mut self, adjs: I) -> Self {
        self.adjectives
            .extend(adjs.into_iter().map(|s| s.as_ref().to_lowercase()));
        self
    }

    pub fn nouns(&self) -> impl Iterator<Item = &str> {
        self.nouns.iter().map(String::as_str)
    }

    pub fn adjectives(&self) -> impl Iterator<Item = &str> {
        self.adjectives.iter().map(String::as_str)
    }

    fn is_noun(&self, w: &str) -> bool {
        self.nouns.contains(w)
            || w.strip_suffix('s')
                .is_some_and(|stem| stem.len() > 1 && self.nouns.contains(stem))
    }

    pub fn tag_word(&self, w: &str) -> PosTag {
        if DETERMINERS.contains(&w) {
            PosTag::Det
        } else if self.is_noun(w) {
            PosTag::Noun
        } else if self.adjectives.contains(w) {
            PosTag::Adj
        } else {
            PosTag::Other
        }
    }

    pub fn tag<S: AsRef<str>>(&self, words: &[S]) -> Vec<PosTag> {
        words.iter().map(|w| self.tag_word(w.as_ref())).collect()
    }
}

/// Maximal `Det? Adj* Noun+` runs, scanned left to right without overlap.
pub fn extract_noun_phrases(tags: &[PosTag]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        let mut j = i;
        if tags[j] == PosTag::Det {
            j += 1;
        }
        while j < tags.len() && tags[j] == PosTag::Adj {
            j += 1;
        }
        let noun_start = j;
        while j < tags.len() && tags[j] == PosTag::Noun {
            j += 1;
        }
        if j > noun_start {
            spans.push(Span::new(i, j));
            i = j;
        } else {
            i += 1;
        }
    }
    spans
}

/// A tokenized sentence with its noun-phrase spans.
#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub id: TextId,
    pub text: String,
    pub words: Vec<String>,
    pub spans: Vec<Span>,
}

impl Sentence {
    pub fn parse(id: TextId, text: &str, lexicon: &Lexicon) -> Self {
        let words = tokenize(text);
        let spans = extract_noun_phrases(&lexicon.tag(&words));
        Self {
            id,
            text: text.to_string(),
            words,
            spans,
        }
    }

    pub fn phrase(&self, span: Span) -> String {
        self.words[span.positions()].join(" ")
    }

    pub fn token_ids(&self, vocab: &Vocab) -> Vec<u32> {
        vocab.encode(&self.words)
    }
}
