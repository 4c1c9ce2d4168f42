use serde::{Deserialize, Serialize};

use super::FusionError;

/// Shape of the fusion transformer and its heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Text positions including `[CLS]` and `[SEP]`.
    pub max_tokens: usize,
    pub max_regions: usize,
    pub modalities: usize,
    pub layer_norm_eps: f64,
    /// Std of the truncated-normal weight init.
    pub init_std: f64,
}

impl ModelConfig {
    /// 12 layers, 768 hidden units, 12 heads.
    pub fn paper_default(vocab_size: usize, feature_dim: usize, num_classes: usize) -> Self {
        Self {
            layers: 12,
            hidden: 768,
            heads: 12,
            intermediate: 3072,
            vocab_size,
            feature_dim,
            num_classes,
            max_tokens: 512,
            max_regions: 100,
            modalities: 2,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
        }
    }

    /// Desk-scale default used by tests: 2 layers, 64 hidden units, 4 heads.
    pub fn toy(vocab_size: usize, feature_dim: usize, num_classes: usize) -> Self {
        Self {
            layers: 2,
            hidden: 64,
            heads: 4,
            intermediate: 256,
            vocab_size,
            feature_dim,
            num_classes,
            max_tokens: 64,
            max_regions: 16,
            modalities: 2,
            layer_norm_eps: 1e-5,
            init_std: 0.2,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        let extents = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("intermediate", self.intermediate),
            ("vocab_size", self.vocab_size),
            ("feature_dim", self.feature_dim),
            ("num_classes", self.num_classes),
            ("max_tokens", self.max_tokens),
            ("max_regions", self.max_regions),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(FusionError::Config(format!("{name} must be at least 1")));
        }
        if self.hidden % self.heads != 0 {
            return Err(FusionError::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.modalities != 2 {
            return Err(FusionError::Config("modalities must be 2".into()));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(FusionError::Config(
                "layer_norm_eps must be positive".into(),
            ));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(FusionError::Config("init_std must be positive".into()));
        }
        Ok(())
    }

    /// Name of the first field that differs from `other`, if any.
    pub fn first_difference(&self, other: &ModelConfig) -> Option<&'static str> {
        let pairs: [(&'static str, bool); 12] = [
            ("layers", self.layers == other.layers),
            ("hidden", self.hidden == other.hidden),
            ("heads", self.heads == other.heads),
            ("intermediate", self.intermediate == other.intermediate),
            ("vocab_size", self.vocab_size == other.vocab_size),
            ("feature_dim", self.feature_dim == other.feature_dim),
            ("num_classes", self.num_classes == other.num_classes),
            ("max_tokens", self.max_tokens == other.max_tokens),
            ("max_regions", self.max_regions == other.max_regions),
            ("modalities", self.modalities == other.modalities),
            (
                "layer_norm_eps",
                self.layer_norm_eps == other.layer_norm_eps,
            ),
            ("init_std", self.init_std == other.init_std),
        ];
        pairs.iter().find(|(_, same)| !same).map(|(n, _)| *n)
    }
}
