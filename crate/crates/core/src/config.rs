//! Model, objective and schedule configuration.
//!
//! Configs are JSON documents. Missing keys fall back to the defaults below;
//! unknown keys are rejected and every value is range-checked by
//! [`ModelConfig::validate`].

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::error::{ImgError, Result};

/// Which retrieval branch drives inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Fusion,
    Visual,
    Audio,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Visual, Branch::Audio, Branch::Fusion];

    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Fusion => "fusion",
            Branch::Visual => "visual",
            Branch::Audio => "audio",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Branch {
    type Err = ImgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fusion" => Ok(Branch::Fusion),
            "visual" => Ok(Branch::Visual),
            "audio" => Ok(Branch::Audio),
            other => Err(ImgError::Config(format!(
                "unknown branch {other:?} (expected fusion, visual or audio)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Pseudo-label generation and curriculum settings for the audio importance predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImportanceConfig {
    /// Temperature of the loss-ratio softmax.
    pub gamma: f64,
    pub eps_min: f64,
    pub eps_max: f64,
    /// Epochs over which the fusion weight ramps from 0.5 to the predicted score.
    pub warmup_epochs: usize,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        Self {
            gamma: 3.0,
            eps_min: 0.2,
            eps_max: 0.8,
            warmup_epochs: 30,
        }
    }
}

impl ImportanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(ImgError::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.eps_min > 0.0 && self.eps_min < 0.5) {
            return Err(ImgError::Config(format!(
                "eps_min must lie in (0, 0.5), got {}",
                self.eps_min
            )));
        }
        if !(self.eps_max > 0.5 && self.eps_max < 1.0) {
            return Err(ImgError::Config(format!(
                "eps_max must lie in (0.5, 1), got {}",
                self.eps_max
            )));
        }
        if self.warmup_epochs == 0 {
            return Err(ImgError::Config("warmup_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Weights of the training objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Importance-predictor BCE weight.
    pub lambda1: f64,
    /// Distillation weight.
    pub lambda2: f64,
    /// Saliency weight.
    pub lambda3: f64,
    /// Distillation temperature.
    pub tau: f64,
    pub saliency_margin: f64,
    /// Positive/negative pairs sampled per stream per sample.
    pub saliency_pairs: usize,
    /// Cross-modal distillation from the fusion branch into the unimodal branches.
    pub distill: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 5.0,
            lambda2: 10.0,
            lambda3: 0.5,
            tau: 2.0,
            saliency_margin: 0.2,
            saliency_pairs: 1,
            distill: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("saliency_margin", self.saliency_margin),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ImgError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(ImgError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.saliency_pairs == 0 {
            return Err(ImgError::Config("saliency_pairs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Common hidden width.
    pub d: usize,
    pub d_v: usize,
    pub d_a: usize,
    pub d_q: usize,
    pub max_frames: usize,
    pub max_tokens: usize,
    /// Attention heads in the encoder transformer sub-block.
    pub heads: usize,
    /// Kernel of the encoder convolution sub-block.
    pub conv_kernel: usize,
    /// Inner width multiplier of feed-forward sub-blocks.
    pub ffn_mult: usize,
    /// Kernel sizes of the local-fusion convolution bank.
    pub kernel_bank: Vec<usize>,
    /// Learnable event slots per modality.
    pub slots: usize,
    pub slot_iters: usize,
    /// Attend to the other modality's event slots instead of the own ones.
    pub event_cross_modal: bool,
    /// Learn a correction to the ingested token embeddings. Off by default:
    /// the embedding table is treated as fixed input data.
    pub tune_query_embeddings: bool,
    /// Rows of the embedding table; required when tuning embeddings.
    pub vocab_size: usize,
    pub importance: ImportanceConfig,
    pub loss: LossWeights,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub branch_for_inference: Branch,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 128,
            d_v: 1024,
            d_a: 2048,
            d_q: 300,
            max_frames: 128,
            max_tokens: 32,
            heads: 4,
            conv_kernel: 7,
            ffn_mult: 2,
            kernel_bank: vec![1, 3, 5],
            slots: 3,
            slot_iters: 3,
            event_cross_modal: false,
            tune_query_embeddings: false,
            vocab_size: 0,
            importance: ImportanceConfig::default(),
            loss: LossWeights::default(),
            lr: 5e-4,
            weight_decay: 0.01,
            epochs: 100,
            batch_size: 16,
            seed: 42,
            branch_for_inference: Branch::Fusion,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    /// Settings sized for the default synthetic corpus on a single CPU core.
    pub fn synthetic() -> Self {
        Self {
            d: 32,
            d_v: 32,
            d_a: 32,
            d_q: 16,
            max_frames: 32,
            max_tokens: 8,
            epochs: 50,
            importance: ImportanceConfig {
                warmup_epochs: 15,
                ..ImportanceConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d", self.d),
            ("d_v", self.d_v),
            ("d_a", self.d_a),
            ("d_q", self.d_q),
            ("max_frames", self.max_frames),
            ("max_tokens", self.max_tokens),
            ("heads", self.heads),
            ("conv_kernel", self.conv_kernel),
            ("ffn_mult", self.ffn_mult),
            ("slots", self.slots),
            ("slot_iters", self.slot_iters),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(ImgError::Config(format!("{name} must be positive")));
            }
        }
        if self.d % 2 != 0 {
            return Err(ImgError::Config(format!(
                "d must be even so the bidirectional merge can split it, got {}",
                self.d
            )));
        }
        if self.d % self.heads != 0 {
            return Err(ImgError::Config(format!(
                "d ({}) must be divisible by heads ({})",
                self.d, self.heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(ImgError::Config(format!(
                "conv_kernel must be odd, got {}",
                self.conv_kernel
            )));
        }
        if self.kernel_bank.is_empty() {
            return Err(ImgError::Config("kernel_bank must not be empty".into()));
        }
        if let Some(k) = self.kernel_bank.iter().find(|&&k| k == 0 || k % 2 == 0) {
            return Err(ImgError::Config(format!(
                "kernel_bank sizes must be odd and positive, got {k}"
            )));
        }
        if self.tune_query_embeddings && self.vocab_size == 0 {
            return Err(ImgError::Config("tune_query_embeddings needs vocab_size > 0".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(ImgError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(ImgError::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        self.importance.validate()?;
        self.loss.validate()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ImgError::io(path, e))?;
        Self::from_json_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::synthetic().validate().unwrap();
    }

    #[test]
    fn unknown_key_rejected() {
        let err = ModelConfig::from_json_str(r#"{"d": 64, "dropout": 0.1}"#).unwrap_err();
        assert!(err.to_string().contains("dropout"), "{err}");
    }

    #[test]
    fn nested_unknown_key_rejected() {
        assert!(ModelConfig::from_json_str(r#"{"loss": {"lambda4": 1.0}}"#).is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = ModelConfig::from_json_str(r#"{"d": 64, "importance": {"gamma": 2.0}}"#).unwrap();
        assert_eq!(cfg.d, 64);
        assert_eq!(cfg.importance.gamma, 2.0);
        assert_eq!(cfg.importance.eps_min, 0.2);
        assert_eq!(cfg.batch_size, 16);
    }

    #[test]
    fn odd_width_rejected() {
        let cfg = ModelConfig {
            d: 33,
            heads: 3,
            ..ModelConfig::synthetic()
        };
        assert!(matches!(cfg.validate(), Err(ImgError::Config(_))));
    }

    #[test]
    fn even_kernel_rejected() {
        let cfg = ModelConfig {
            kernel_bank: vec![1, 2],
            ..ModelConfig::synthetic()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn thresholds_checked() {
        let mut cfg = ModelConfig::synthetic();
        cfg.importance.eps_max = 0.4;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::synthetic();
        cfg.loss.tau = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn branch_parse() {
        assert_eq!("visual".parse::<Branch>().unwrap(), Branch::Visual);
        assert!("video".parse::<Branch>().is_err());
    }
}
