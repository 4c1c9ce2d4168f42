use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::CorpusError;
use crate::aligner::{BoundingBox, ImageId, Region, RegionSet, Span, TextId};

const CONCEPT_NAMES: &[&str] = &[
    "dog",
    "cat",
    "horse",
    "bird",
    "couch",
    "chair",
    "table",
    "bed",
    "car",
    "bus",
    "bike",
    "tree",
    "house",
    "window",
    "door",
    "cup",
    "plate",
    "book",
    "phone",
    "ball",
    "hat",
    "shirt",
    "lamp",
    "clock",
    "bottle",
    "bowl",
    "vase",
    "kite",
    "boat",
    "train",
    "truck",
    "bench",
    "fence",
    "sign",
    "flower",
    "apple",
    "banana",
    "pizza",
    "cake",
    "laptop",
    "mouse",
    "keyboard",
    "oven",
    "sink",
    "umbrella",
    "bag",
    "tie",
    "skateboard",
    "surfboard",
    "guitar",
    "piano",
    "camera",
    "wheel",
    "mirror",
    "pillow",
    "blanket",
    "rug",
    "candle",
    "basket",
    "bucket",
    "ladder",
    "rope",
    "shelf",
    "towel",
];

const ADJECTIVES: &[&str] = &[
    "red", "blue", "green", "yellow", "black", "white", "small", "big", "old", "wooden",
];

const DETERMINERS: &[&str] = &["a", "the", "this"];

const PREFIXES: &[&str] = &["a photo of", "a picture showing", "an image with"];

const CONNECTORS: &[&str] = &["and", "with", "near", "beside"];

/// Parameters of a synthetic world with planted image-caption and
/// phrase-region correspondences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub num_concepts: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Inclusive range of distinct concepts per image.
    pub concepts_per_image: (usize, usize),
    pub num_images: usize,
    /// Extra images with their own true captions, kept out of the text pool.
    pub num_heldout: usize,
    pub num_distractors: usize,
    pub width: f32,
    pub height: f32,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            num_concepts: 40,
            feature_dim: 16,
            noise_sigma: 0.1,
            concepts_per_image: (6, 6),
            num_images: 200,
            num_heldout: 100,
            num_distractors: 1000,
            width: 640.0,
            height: 480.0,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Spec(m));
        if self.num_concepts < 2 {
            return bad("num_concepts must be at least 2".into());
        }
        if self.num_concepts > CONCEPT_NAMES.len() {
            return bad(format!(
                "num_concepts is limited to {}",
                CONCEPT_NAMES.len()
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative".into());
        }
        let (lo, hi) = self.concepts_per_image;
        if lo == 0 || lo > hi || hi > self.num_concepts {
            return bad(format!(
                "concepts_per_image ({lo}, {hi}) must satisfy 1 <= lo <= hi <= num_concepts"
            ));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be at least 1".into());
        }
        if !(self.width >= 8.0 && self.height >= 8.0) {
            return bad("image size must be at least 8x8".into());
        }
        Ok(())
    }

    pub fn concept_names(&self) -> Vec<String> {
        CONCEPT_NAMES[..self.num_concepts]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }
}

/// Caption words covering one planted phrase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseTruth {
    pub span: Span,
    pub region: usize,
}

/// Ground truth for one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub image_id: ImageId,
    pub text_id: TextId,
    pub phrases: Vec<PhraseTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRecord {
    pub id: TextId,
    pub text: String,
}

/// One split of a generated world.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldSplit {
    pub images: Vec<RegionSet>,
    pub texts: Vec<TextRecord>,
    pub truth: Vec<TruthRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub concepts: Vec<String>,
    pub adjectives: Vec<String>,
    pub prototypes: Vec<Vec<f32>>,
    /// Training images and the retrieval pool (true captions plus distractors).
    pub train: WorldSplit,
    /// Held-out images with only their true captions.
    pub heldout: WorldSplit,
}

struct Caption {
    text: String,
    spans: Vec<Span>,
}

fn caption<R: Rng>(concepts: &[usize], names: &[String], rng: &mut R) -> Caption {
    let prefix = PREFIXES.choose(rng).expect("non-empty");
    let mut words: Vec<String> = prefix.split(' ').map(str::to_string).collect();
    let mut spans = Vec::with_capacity(concepts.len());
    for (i, &c) in concepts.iter().enumerate() {
        if i > 0 {
            words.push(CONNECTORS.choose(rng).expect("non-empty").to_string());
        }
        let start = words.len();
        words.push(DETERMINERS.choose(rng).expect("non-empty").to_string());
        words.push(ADJECTIVES.choose(rng).expect("non-empty").to_string());
        words.push(names[c].clone());
        spans.push(Span::new(start, words.len()));
    }
    Caption {
        text: words.join(" "),
        spans,
    }
}

fn sample_concepts<R: Rng>(spec: &WorldSpec, rng: &mut R) -> Vec<usize> {
    let (lo, hi) = spec.concepts_per_image;
    let k = rng.gen_range(lo..=hi);
    rand::seq::index::sample(rng, spec.num_concepts, k).into_vec()
}

fn random_box<R: Rng>(spec: &WorldSpec, rng: &mut R) -> BoundingBox {
    let w = rng.gen_range(spec.width * 0.1..spec.width * 0.5);
    let h = rng.gen_range(spec.height * 0.1..spec.height * 0.5);
    let x1 = rng.gen_range(0.0..spec.width - w);
    let y1 = rng.gen_range(0.0..spec.height - h);
    BoundingBox::new(x1, y1, x1 + w, y1 + h)
}

struct Generator<'a> {
    spec: &'a WorldSpec,
    names: &'a [String],
    prototypes: &'a [Vec<f32>],
    noise: Normal<f64>,
}

impl Generator<'_> {
    /// One image and its planted caption. Region order is shuffled so the
    /// region index carries no information about caption order.
    fn image<R: Rng>(
        &self,
        id: ImageId,
        text_id: TextId,
        rng: &mut R,
    ) -> (RegionSet, TextRecord, TruthRecord) {
        let concepts = sample_concepts(self.spec, rng);
        let mut order: Vec<usize> = (0..concepts.len()).collect();
        order.shuffle(rng);
        let regions = order
            .iter()
            .map(|&slot| {
                let c = concepts[slot];
                let feature = self.prototypes[c]
                    .iter()
                    .map(|&p| {
                        let n = self.noise.sample(rng) as f32;
                        if self.spec.noise_sigma == 0.0 {
                            p
                        } else {
                            p + n
                        }
                    })
                    .collect();
                Region {
                    feature,
                    bbox: random_box(self.spec, rng),
                    tag: self.names[c].clone(),
                    class_id: c as u32,
                    confidence: 1.0,
                }
            })
            .collect();
        let cap = caption(&concepts, self.names, rng);
        let phrases = cap
            .spans
            .iter()
            .enumerate()
            .map(|(slot, &span)| PhraseTruth {
                span,
                region: order.iter().position(|&o| o == slot).expect("permutation"),
            })
            .collect();
        (
            RegionSet {
                id,
                width: self.spec.width,
                height: self.spec.height,
                regions,
            },
            TextRecord {
                id: text_id,
                text: cap.text,
            },
            TruthRecord {
                image_id: id,
                text_id,
                phrases,
            },
        )
    }
}

/// Generates a world deterministically from `spec.seed`.
///
/// Text ids in the training pool are a random permutation so that id order
/// says nothing about which captions are planted.
pub fn generate_world(spec: &WorldSpec) -> Result<World, CorpusError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let names = spec.concept_names();
    let unit = Normal::new(0.0, 1.0).expect("valid");
    let prototypes: Vec<Vec<f32>> = (0..spec.num_concepts)
        .map(|_| {
            (0..spec.feature_dim)
                .map(|_| unit.sample(&mut rng) as f32)
                .collect()
        })
        .collect();
    let gen = Generator {
        spec,
        names: &names,
        prototypes: &prototypes,
        noise: Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid"),
    };

    let pool = spec.num_images + spec.num_distractors;
    let mut text_ids: Vec<TextId> = (0..pool as TextId).collect();
    text_ids.shuffle(&mut rng);

    let mut train = WorldSplit {
        images: Vec::with_capacity(spec.num_images),
        texts: Vec::with_capacity(pool),
        truth: Vec::with_capacity(spec.num_images),
    };
    for i in 0..spec.num_images {
        let (img, text, truth) = gen.image(i as ImageId, text_ids[i], &mut rng);
        train.images.push(img);
        train.texts.push(text);
        train.truth.push(truth);
    }
    for &id in &text_ids[spec.num_images..] {
        let concepts = sample_concepts(spec, &mut rng);
        train.texts.push(TextRecord {
            id,
            text: caption(&concepts, &names, &mut rng).text,
        });
    }
    train.texts.sort_by_key(|t| t.id);

    let mut heldout = WorldSplit {
        images: Vec::new(),
        texts: Vec::new(),
        truth: Vec::new(),
    };
    for i in 0..spec.num_heldout {
        let id = (spec.num_images + i) as ImageId;
        let (img, text, truth) = gen.image(id, (pool + i) as TextId, &mut rng);
        heldout.images.push(img);
        heldout.texts.push(text);
        heldout.truth.push(truth);
    }
    Ok(World {
        spec: spec.clone(),
        concepts: names,
        adjectives: ADJECTIVES.iter().map(|s| s.to_string()).collect(),
        prototypes,
        train,
        heldout,
    })
}
