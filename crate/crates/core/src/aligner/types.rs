use serde::{Deserialize, Serialize};

pub type ImageId = u64;
pub type TextId = u64;

/// Pixel-space box, top-left `(x1, y1)` to bottom-right `(x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BoundingBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f32 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

/// One detected region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub feature: Vec<f32>,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub tag: String,
    pub class_id: u32,
    pub confidence: f32,
}

/// All detected regions of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSet {
    pub id: ImageId,
    pub width: f32,
    pub height: f32,
    pub regions: Vec<Region>,
}

impl RegionSet {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn tags(&self) -> Vec<String> {
        self.regions.iter().map(|r| r.tag.clone()).collect()
    }

    /// Checks the type invariants, returning the offending field path.
    pub fn validate(&self, feature_dim: usize, num_classes: usize) -> Result<(), String> {
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err("width/height must be positive".into());
        }
        if self.regions.is_empty() {
            return Err("regions: image has no regions".into());
        }
        for (i, r) in self.regions.iter().enumerate() {
            let b = r.bbox;
            if !(0.0 <= b.x1 && b.x1 < b.x2 && b.x2 <= self.width) {
                return Err(format!("regions[{i}].box: need 0 <= x1 < x2 <= width"));
            }
            if !(0.0 <= b.y1 && b.y1 < b.y2 && b.y2 <= self.height) {
                return Err(format!("regions[{i}].box: need 0 <= y1 < y2 <= height"));
            }
            if r.feature.len() != feature_dim {
                return Err(format!(
                    "regions[{i}].feature: dimension {} does not match header {feature_dim}",
                    r.feature.len()
                ));
            }
            if r.feature.iter().any(|x| !x.is_finite()) {
                return Err(format!("regions[{i}].feature: non-finite value"));
            }
            if r.class_id as usize >= num_classes {
                return Err(format!(
                    "regions[{i}].class_id: {} >= number of classes {num_classes}",
                    r.class_id
                ));
            }
            if !(0.0..=1.0).contains(&r.confidence) {
                return Err(format!("regions[{i}].confidence: outside [0, 1]"));
            }
            if r.tag.trim().is_empty() {
                return Err(format!("regions[{i}].tag: empty"));
            }
        }
        Ok(())
    }
}

/// Half-open token range `[start, end)` over a sentence's words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

/// A phrase-to-region link with its similarity score in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub span: Span,
    pub region: usize,
    pub score: f32,
}

/// A retrieved (image, sentence) candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakPair {
    pub image_id: ImageId,
    pub text_id: TextId,
    /// 1-based retrieval rank.
    pub rank: u32,
    pub score: f64,
    pub links: Vec<Link>,
    pub label: u8,
}
