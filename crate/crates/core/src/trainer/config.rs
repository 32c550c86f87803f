use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Where the positive partner of each ASR sentence comes from during pre-training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingMode {
    /// The manual transcript.
    CleanAsr,
    /// A second dropout pass over the same ASR sentence.
    SimcseDropout,
}

/// Which sentences are masked for the MLM objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlmSide {
    Clean,
    Asr,
    Both,
}

/// Which transcripts fine-tuning trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneData {
    Asr,
    Manual,
    ManualPlusAsr,
}

/// Every knob of both training stages, as one flat table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub seed: u64,

    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub min_freq: usize,

    pub mask_ratio: f64,
    pub tau_c: f64,
    pub tau_sc: f64,
    pub tau_d: f64,
    pub lambda_mlm: f64,
    pub lambda_sc: f64,
    pub lambda_d: f64,

    pub use_c: bool,
    pub use_mlm: bool,
    pub use_hard: bool,
    pub use_d: bool,
    pub use_soft: bool,
    pub pairing_mode: PairingMode,
    pub mlm_side: MlmSide,
    pub finetune_data: FinetuneData,

    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub finetune_epochs: usize,
    pub finetune_batch: usize,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_frac: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,

    pub patience: usize,
    pub val_frac: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            seed: 0,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            max_len: 32,
            dropout: 0.1,
            min_freq: 1,
            mask_ratio: 0.15,
            tau_c: w.tau_c,
            tau_sc: w.tau_sc,
            tau_d: w.tau_d,
            lambda_mlm: w.lambda_mlm,
            lambda_sc: w.lambda_sc,
            lambda_d: w.lambda_d,
            use_c: true,
            use_mlm: true,
            use_hard: true,
            use_d: true,
            use_soft: true,
            pairing_mode: PairingMode::CleanAsr,
            mlm_side: MlmSide::Both,
            finetune_data: FinetuneData::Asr,
            pretrain_steps: 300,
            pretrain_batch: 64,
            finetune_epochs: 10,
            finetune_batch: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_frac: 0.05,
            grad_clip: 1.0,
            patience: 3,
            val_frac: 0.1,
        }
    }
}

impl TrainingConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            tau_c: self.tau_c,
            tau_sc: self.tau_sc,
            tau_d: self.tau_d,
            lambda_mlm: self.lambda_mlm,
            lambda_sc: self.lambda_sc,
            lambda_d: self.lambda_d,
        }
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
            dropout_prob: self.dropout,
        }
    }

    /// Plain cross-entropy fine-tuning: every auxiliary term off.
    pub fn ce_only(mut self) -> Self {
        self.use_hard = false;
        self.use_d = false;
        self.use_soft = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights().validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.pretrain_batch < 2 || self.finetune_batch < 2 {
            return bad(format!(
                "contrastive batches need at least 2 examples (pretrain_batch {}, finetune_batch {})",
                self.pretrain_batch, self.finetune_batch
            ));
        }
        if self.patience < 1 {
            return bad("patience must be at least 1".into());
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio must lie in (0, 1), got {}", self.mask_ratio));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("optimizer settings out of range".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || !(0.0..1.0).contains(&self.val_frac) {
            return bad("warmup_frac must lie in [0, 1] and val_frac in [0, 1)".into());
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be >= 0".into());
        }
        if !self.use_c && !self.use_mlm {
            return bad("pre-training needs at least one of use_c and use_mlm".into());
        }
        self.encoder_config(8).validate()
    }

    /// Reads a TOML table; absent keys keep their defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Parses `key=value` into a TOML value; bare words become strings.
pub fn parse_override(item: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key, value))
}
