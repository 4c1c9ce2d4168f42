use super::FusionError;
use crate::aligner::{BoundingBox, MaskPlan, RegionSet, CLS, MASK, PAD, SEP};

/// `[x1/W, y1/H, x2/W, y2/H, area/(W·H)]`.
pub fn encode_box_geometry(
    b: BoundingBox,
    width: f32,
    height: f32,
) -> Result<[f32; 5], FusionError> {
    let valid = width > 0.0
        && height > 0.0
        && 0.0 <= b.x1
        && b.x1 < b.x2
        && b.x2 <= width
        && 0.0 <= b.y1
        && b.y1 < b.y2
        && b.y2 <= height;
    if !valid {
        return Err(FusionError::DegenerateBox(
            [b.x1, b.y1, b.x2, b.y2],
            width,
            height,
        ));
    }
    Ok([
        b.x1 / width,
        b.y1 / height,
        b.x2 / width,
        b.y2 / height,
        (b.y2 - b.y1) * (b.x2 - b.x1) / (width * height),
    ])
}

/// Model input: `[CLS] text [SEP]` followed by regions.
///
/// Padding may be appended to either segment; padded positions are never
/// attended to.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedInput {
    pub tokens: Vec<u32>,
    pub token_valid: Vec<bool>,
    pub features: Vec<Vec<f32>>,
    pub geometry: Vec<[f32; 5]>,
    pub region_valid: Vec<bool>,
}

impl FusedInput {
    /// Applies `plan` to the text segment and region features.
    pub fn build(text: &[u32], regions: &RegionSet, plan: &MaskPlan) -> Result<Self, FusionError> {
        let body = plan.apply_text(text, MASK);
        let mut tokens = Vec::with_capacity(body.len() + 2);
        tokens.push(CLS);
        tokens.extend(body);
        tokens.push(SEP);
        let mut features = Vec::with_capacity(regions.len());
        let mut geometry = Vec::with_capacity(regions.len());
        for (i, r) in regions.regions.iter().enumerate() {
            geometry.push(encode_box_geometry(r.bbox, regions.width, regions.height)?);
            if plan.region_masked(i) {
                features.push(vec![0.0; r.feature.len()]);
            } else {
                features.push(r.feature.clone());
            }
        }
        Ok(Self {
            token_valid: vec![true; tokens.len()],
            region_valid: vec![true; features.len()],
            tokens,
            features,
            geometry,
        })
    }

    /// Appends invalid positions up to the given segment lengths.
    pub fn pad_to(mut self, tokens: usize, regions: usize) -> Self {
        let dim = self.features.first().map_or(0, Vec::len);
        while self.tokens.len() < tokens {
            self.tokens.push(PAD);
            self.token_valid.push(false);
        }
        while self.features.len() < regions {
            self.features.push(vec![0.0; dim]);
            self.geometry.push([0.0; 5]);
            self.region_valid.push(false);
        }
        self
    }

    pub fn text_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn num_regions(&self) -> usize {
        self.features.len()
    }

    pub fn seq_len(&self) -> usize {
        self.text_len() + self.num_regions()
    }

    /// Sequence position of word `i` of the text body.
    pub fn word_position(&self, i: usize) -> usize {
        i + 1
    }

    pub fn region_position(&self, r: usize) -> usize {
        self.text_len() + r
    }

    pub fn valid(&self) -> Vec<bool> {
        self.token_valid
            .iter()
            .chain(&self.region_valid)
            .copied()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_image_box() {
        let g =
            encode_box_geometry(BoundingBox::new(0.0, 0.0, 640.0, 480.0), 640.0, 480.0).unwrap();
        assert_eq!(g, [0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn hand_evaluated_box() {
        let g =
            encode_box_geometry(BoundingBox::new(10.0, 20.0, 30.0, 60.0), 100.0, 100.0).unwrap();
        let expect = [0.1, 0.2, 0.3, 0.6, 0.08];
        for (a, b) in g.iter().zip(expect) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn scaling_image_and_box_together_is_invariant() {
        let a = encode_box_geometry(BoundingBox::new(3.0, 5.0, 9.0, 17.0), 32.0, 64.0).unwrap();
        let b =
            encode_box_geometry(BoundingBox::new(12.0, 20.0, 36.0, 68.0), 128.0, 256.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_area_box_rejected() {
        assert!(encode_box_geometry(BoundingBox::new(5.0, 5.0, 5.0, 9.0), 10.0, 10.0).is_err());
        assert!(encode_box_geometry(BoundingBox::new(5.0, 5.0, 11.0, 9.0), 10.0, 10.0).is_err());
    }
}
