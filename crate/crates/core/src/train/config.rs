use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::fusion::ModelConfig;
use crate::numkernel::AdamConfig;
use crate::objectives::Schedule;

const TOY: &str = include_str!("../../presets/toy.cfg");
const PAPER: &str = include_str!("../../presets/paper.cfg");

/// Model shape and optimization settings, read from a flat `key = value` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub init_std: f64,
    pub max_tokens: usize,
    pub max_regions: usize,
    pub batch_size: usize,
    pub epochs: u64,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    /// Epochs of unweighted summation before `w_ITM` weighting starts.
    pub warmup_epochs: u64,
    pub weighted_itm: bool,
    pub mask_rate: f64,
    /// Base rate ρ of proportional region-phrase masking.
    pub link_mask_rate: f64,
    pub itm_negative_prob: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self::parse(TOY).expect("toy preset parses")
    }

    pub fn paper() -> Self {
        Self::parse(PAPER).expect("paper preset parses")
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "paper" | "paper-defaults" => Some(Self::paper()),
            _ => None,
        }
    }

    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let c: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// A preset name or a path to a config file.
    pub fn load(spec: &str) -> Result<Self, TrainError> {
        if let Some(c) = Self::preset(spec) {
            return Ok(c);
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return fail("init_std must be positive");
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if !(self.peak_lr >= 0.0) {
            return fail("peak_lr must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return fail("warmup_fraction must be in [0, 1]");
        }
        for (name, v) in [
            ("mask_rate", self.mask_rate),
            ("link_mask_rate", self.link_mask_rate),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(TrainError::Config(format!("{name} must be in [0, 1)")));
            }
        }
        if !(0.0..=1.0).contains(&self.itm_negative_prob) {
            return fail("itm_negative_prob must be in [0, 1]");
        }
        if self.max_grad_norm.is_some_and(|m| !(m > 0.0)) {
            return fail("max_grad_norm must be positive");
        }
        Ok(())
    }

    pub fn model_config(
        &self,
        vocab_size: usize,
        feature_dim: usize,
        num_classes: usize,
    ) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            intermediate: self.intermediate,
            vocab_size,
            feature_dim,
            num_classes,
            max_tokens: self.max_tokens,
            max_regions: self.max_regions,
            modalities: 2,
            layer_norm_eps: 1e-5,
            init_std: self.init_std,
        }
    }

    pub fn adam(&self, total_steps: u64) -> AdamConfig {
        let mut a = AdamConfig::new(self.peak_lr, self.warmup_fraction, total_steps);
        a.weight_decay = self.weight_decay;
        a.max_grad_norm = self.max_grad_norm;
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_with_expected_values() {
        let p = TrainConfig::paper();
        assert_eq!((p.layers, p.hidden, p.heads), (12, 768, 12));
        assert_eq!((p.batch_size, p.epochs, p.peak_lr), (480, 20, 6e-5));
        assert_eq!(p.warmup_epochs, 1);
        let t = TrainConfig::toy();
        assert_eq!((t.layers, t.hidden, t.heads, t.batch_size), (2, 64, 4, 32));
        assert_eq!(t.schedule, Schedule::Sum);
        assert!(t.max_grad_norm.is_none());
    }

    #[test]
    fn text_round_trip() {
        let t = TrainConfig::toy();
        assert_eq!(TrainConfig::parse(&t.to_text()).unwrap(), t);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        let mut text = TrainConfig::toy().to_text();
        text.push_str("bogus = 1\n");
        assert!(TrainConfig::parse(&text).is_err());
        let bad = TrainConfig::toy()
            .to_text()
            .replace("batch_size = 32", "batch_size = 0");
        assert!(TrainConfig::parse(&bad).is_err());
    }
}
