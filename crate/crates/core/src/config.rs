//! Run configuration: flat `key = value` text files.
//!
//! Unknown keys are hard errors that list every valid key, so a typo cannot
//! silently fall back to a default. `#` starts a comment.

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::optim::TrainConfig;
use crate::pooling::PoolingKind;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    /// Query count for attention pooling.
    pub attention_heads: usize,
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            encoder: EncoderConfig::default(),
            attention_heads: 8,
            train_data: None,
            eval_data: None,
        }
    }
}

const VALID_KEYS: &[&str] = &[
    "train_data",
    "eval_data",
    "seed",
    "base_lr",
    "weight_decay",
    "llrd",
    "warmup_ratio",
    "epochs",
    "micro_batch",
    "grad_accum",
    "focal_gamma",
    "focal_alpha",
    "pooling",
    "max_seq_len",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "num_layers",
    "hidden",
    "heads",
    "ffn_dim",
    "vocab_size",
    "max_positions",
    "encoder_dropout",
    "attention_heads",
];

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_str_content(&text)
    }

    pub fn from_str_content(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("key {key}: cannot parse {value:?}")))
        }
        match key {
            "train_data" => self.train_data = Some(PathBuf::from(value)),
            "eval_data" => self.eval_data = Some(PathBuf::from(value)),
            "seed" => self.train.seed = num(key, value)?,
            "base_lr" => self.train.base_lr = num(key, value)?,
            "weight_decay" => self.train.weight_decay = num(key, value)?,
            "llrd" => self.train.llrd = num(key, value)?,
            "warmup_ratio" => self.train.warmup_ratio = num(key, value)?,
            "epochs" => self.train.epochs = num(key, value)?,
            "micro_batch" => self.train.micro_batch = num(key, value)?,
            "grad_accum" => self.train.grad_accum = num(key, value)?,
            "focal_gamma" => self.train.focal_gamma = num(key, value)?,
            "focal_alpha" => self.train.focal_alpha = num(key, value)?,
            "pooling" => self.train.pooling = PoolingKind::parse(value)?,
            "max_seq_len" => self.train.max_seq_len = num(key, value)?,
            "adam_beta1" => self.train.adam.beta1 = num(key, value)?,
            "adam_beta2" => self.train.adam.beta2 = num(key, value)?,
            "adam_eps" => self.train.adam.eps = num(key, value)?,
            "num_layers" => self.encoder.num_layers = num(key, value)?,
            "hidden" => self.encoder.hidden = num(key, value)?,
            "heads" => self.encoder.heads = num(key, value)?,
            "ffn_dim" => self.encoder.ffn_dim = num(key, value)?,
            "vocab_size" => self.encoder.vocab_size = num(key, value)?,
            "max_positions" => self.encoder.max_positions = num(key, value)?,
            "encoder_dropout" => self.encoder.dropout_rate = num(key, value)?,
            "attention_heads" => self.attention_heads = num(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key {other:?}; valid keys: {}",
                    VALID_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.encoder.validate()?;
        crate::loss::FocalConfig {
            gamma: self.train.focal_gamma,
            alpha: self.train.focal_alpha,
        }
        .validate()?;
        if self.attention_heads == 0 {
            return Err(Error::Config("attention_heads must be positive".into()));
        }
        Ok(())
    }
}
