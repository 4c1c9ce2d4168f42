use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{CorpusError, TextRecord, TruthRecord, World, WorldSplit};
use crate::aligner::{tokenize, ImageId, Lexicon, RegionSet, Sentence, TextId, WeakPair};

pub const SCHEMA_VERSION: u32 = 1;

/// First line of every dataset file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Header {
    pub schema: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
    /// Region class names, indexed by class id.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nouns: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adjectives: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<String>,
}

impl Header {
    fn new(schema: &str) -> Self {
        Self {
            schema: schema.into(),
            version: SCHEMA_VERSION,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageFile {
    pub feature_dim: usize,
    pub classes: Vec<String>,
    pub images: Vec<RegionSet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextFile {
    /// Open-class words added to the built-in lexicon.
    pub nouns: Vec<String>,
    pub adjectives: Vec<String>,
    pub texts: Vec<TextRecord>,
}

impl TextFile {
    pub fn lexicon(&self) -> Lexicon {
        Lexicon::builtin()
            .with_nouns(&self.nouns)
            .with_adjectives(&self.adjectives)
    }

    pub fn sentences(&self) -> Vec<Sentence> {
        let lex = self.lexicon();
        self.texts
            .iter()
            .map(|t| Sentence::parse(t.id, &t.text, &lex))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairFile {
    pub k: usize,
    pub provider: String,
    pub pairs: Vec<WeakPair>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn invalid(path: &Path, line: usize, message: impl Into<String>) -> CorpusError {
    CorpusError::Validation {
        file: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn write_jsonl<T: Serialize>(
    path: &Path,
    header: &Header,
    records: &[T],
) -> Result<(), CorpusError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut put = |v: String| -> Result<(), CorpusError> {
        w.write_all(v.as_bytes()).map_err(io_err(path))?;
        w.write_all(b"\n").map_err(io_err(path))
    };
    put(serde_json::to_string(header)?)?;
    for r in records {
        put(serde_json::to_string(r)?)?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a header and records, returning each record with its 1-based line.
fn read_jsonl<T: DeserializeOwned>(
    path: &Path,
    schema: &str,
) -> Result<(Header, Vec<(usize, T)>), CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header: Header = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(io_err(path))?;
            serde_json::from_str(&line).map_err(|e| invalid(path, 1, format!("header: {e}")))?
        }
        None => return Err(invalid(path, 1, "missing header record")),
    };
    if header.schema != schema {
        return Err(invalid(
            path,
            1,
            format!(
                "header.schema: expected {schema:?}, found {:?}",
                header.schema
            ),
        ));
    }
    if header.version != SCHEMA_VERSION {
        return Err(invalid(
            path,
            1,
            format!("header.version: unsupported version {}", header.version),
        ));
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record =
            serde_json::from_str(&line).map_err(|e| invalid(path, i + 1, e.to_string()))?;
        records.push((i + 1, record));
    }
    Ok((header, records))
}

fn check_unique<I: Iterator<Item = (usize, u64)>>(
    path: &Path,
    what: &str,
    ids: I,
) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    for (line, id) in ids {
        if !seen.insert(id) {
            return Err(invalid(path, line, format!("id: duplicate {what} id {id}")));
        }
    }
    Ok(())
}

pub fn write_images(path: &Path, file: &ImageFile) -> Result<(), CorpusError> {
    let header = Header {
        feature_dim: Some(file.feature_dim),
        classes: file.classes.clone(),
        ..Header::new("images")
    };
    write_jsonl(path, &header, &file.images)
}

pub fn read_images(path: &Path) -> Result<ImageFile, CorpusError> {
    let (header, records) = read_jsonl::<RegionSet>(path, "images")?;
    let feature_dim = header
        .feature_dim
        .ok_or_else(|| invalid(path, 1, "header.feature_dim: missing"))?;
    if header.classes.is_empty() {
        return Err(invalid(path, 1, "header.classes: missing"));
    }
    for (line, img) in &records {
        img.validate(feature_dim, header.classes.len())
            .map_err(|m| invalid(path, *line, m))?;
    }
    check_unique(path, "image", records.iter().map(|(l, r)| (*l, r.id)))?;
    Ok(ImageFile {
        feature_dim,
        classes: header.classes,
        images: records.into_iter().map(|(_, r)| r).collect(),
    })
}

pub fn write_texts(path: &Path, file: &TextFile) -> Result<(), CorpusError> {
    let header = Header {
        nouns: file.nouns.clone(),
        adjectives: file.adjectives.clone(),
        ..Header::new("texts")
    };
    write_jsonl(path, &header, &file.texts)
}

pub fn read_texts(path: &Path) -> Result<TextFile, CorpusError> {
    let (header, records) = read_jsonl::<TextRecord>(path, "texts")?;
    for (line, t) in &records {
        if tokenize(&t.text).is_empty() {
            return Err(invalid(path, *line, "text: empty sentence"));
        }
    }
    check_unique(path, "text", records.iter().map(|(l, r)| (*l, r.id)))?;
    Ok(TextFile {
        nouns: header.nouns,
        adjectives: header.adjectives,
        texts: records.into_iter().map(|(_, r)| r).collect(),
    })
}

pub fn write_pairs(path: &Path, file: &PairFile) -> Result<(), CorpusError> {
    let header = Header {
        k: Some(file.k),
        provider: Some(file.provider.clone()),
        ..Header::new("pairs")
    };
    write_jsonl(path, &header, &file.pairs)
}

pub fn read_pairs(path: &Path) -> Result<PairFile, CorpusError> {
    let (header, records) = read_jsonl::<WeakPair>(path, "pairs")?;
    let k = header
        .k
        .ok_or_else(|| invalid(path, 1, "header.k: missing"))?;
    for (line, p) in &records {
        if p.label > 1 {
            return Err(invalid(path, *line, "label: must be 0 or 1"));
        }
        if p.rank == 0 {
            return Err(invalid(path, *line, "rank: ranks are 1-based"));
        }
        if let Some(i) = p
            .links
            .iter()
            .position(|l| !(l.score > 0.0 && l.score <= 1.0))
        {
            return Err(invalid(
                path,
                *line,
                format!("links[{i}].score: outside (0, 1]"),
            ));
        }
    }
    Ok(PairFile {
        k,
        provider: header.provider.unwrap_or_default(),
        pairs: records.into_iter().map(|(_, r)| r).collect(),
    })
}

pub fn write_truth(path: &Path, truth: &[TruthRecord]) -> Result<(), CorpusError> {
    write_jsonl(path, &Header::new("truth"), truth)
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthRecord>, CorpusError> {
    let (_, records) = read_jsonl::<TruthRecord>(path, "truth")?;
    Ok(records.into_iter().map(|(_, r)| r).collect())
}

/// Checks that pairs reference known images and sentences and that every link
/// points at a real region and a noun-phrase span.
pub fn validate_pairs(
    pairs: &[WeakPair],
    images: &[RegionSet],
    sentences: &[Sentence],
) -> Result<(), String> {
    let regions: HashMap<ImageId, usize> = images.iter().map(|i| (i.id, i.len())).collect();
    let spans: HashMap<TextId, &Sentence> = sentences.iter().map(|s| (s.id, s)).collect();
    for (n, p) in pairs.iter().enumerate() {
        let count = *regions
            .get(&p.image_id)
            .ok_or_else(|| format!("pairs[{n}].image_id: unknown image {}", p.image_id))?;
        let s = spans
            .get(&p.text_id)
            .ok_or_else(|| format!("pairs[{n}].text_id: unknown text {}", p.text_id))?;
        for (i, l) in p.links.iter().enumerate() {
            if l.region >= count {
                return Err(format!(
                    "pairs[{n}].links[{i}].region: {} >= {count}",
                    l.region
                ));
            }
            if !s.spans.contains(&l.span) {
                return Err(format!("pairs[{n}].links[{i}].span: not a noun phrase"));
            }
        }
    }
    Ok(())
}

fn split_files(dir: &Path, world: &World, split: &WorldSplit) -> Result<(), CorpusError> {
    write_images(
        &dir.join("images.jsonl"),
        &ImageFile {
            feature_dim: world.spec.feature_dim,
            classes: world.concepts.clone(),
            images: split.images.clone(),
        },
    )?;
    write_texts(
        &dir.join("texts.jsonl"),
        &TextFile {
            nouns: world.concepts.clone(),
            adjectives: world.adjectives.clone(),
            texts: split.texts.clone(),
        },
    )?;
    write_truth(&dir.join("truth.jsonl"), &split.truth)
}

/// Writes `images.jsonl`, `texts.jsonl`, `truth.jsonl` and the same three
/// files for the held-out split under `heldout/`.
pub fn write_world(dir: &Path, world: &World) -> Result<(), CorpusError> {
    split_files(dir, world, &world.train)?;
    split_files(&dir.join("heldout"), world, &world.heldout)
}
