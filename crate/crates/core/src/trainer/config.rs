use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config;
use crate::data::AugmentationConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalProtocol;
use crate::losses::LossConfig;
use crate::networks::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    Full,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            _ => Err(Error::Config(format!("unknown preset `{s}`; valid presets: desk, full"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Selects the defaults of every other field.
    pub preset: Preset,
    pub epochs: usize,
    pub lr: f64,
    pub lr_after_decay: f64,
    /// First epoch trained at `lr_after_decay`.
    pub decay_epoch: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub ssim_alpha: f64,
    pub seed: u64,
    /// Written into `model.depth.use_attention` on resolution.
    pub attention_on: bool,
    /// Written into `model.depth.use_ddv` on resolution.
    pub ddv_on: bool,
    /// Stops after this many optimizer steps; 0 means no limit.
    pub max_steps: u64,
    /// Triplets whose target differs from a neighbour by less than this
    /// mean absolute difference are dropped.
    pub static_threshold: f64,
    pub train_split: String,
    pub val_split: String,
    pub augmentation: AugmentationConfig,
    pub eval: EvalProtocol,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            epochs: 20,
            lr: 1e-4,
            lr_after_decay: 1e-5,
            decay_epoch: 15,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            lambda: 1e-3,
            ssim_alpha: 0.85,
            seed: 0,
            attention_on: true,
            ddv_on: true,
            max_steps: 0,
            static_threshold: 0.01,
            train_split: "train.txt".into(),
            val_split: "val.txt".into(),
            augmentation: AugmentationConfig::default(),
            eval: EvalProtocol::default(),
            model: ModelConfig::desk(),
        }
    }

    pub fn full() -> Self {
        Self {
            preset: Preset::Full,
            batch_size: 12,
            model: ModelConfig::full(),
            ..Self::desk()
        }
    }

    pub fn for_preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Full => Self::full(),
        }
    }

    /// Defaults of the chosen preset, then `file`, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let layer = file.map(config::load_value).transpose()?;
        let preset = match config::peek_string(layer.as_ref(), overrides, "preset")? {
            Some(p) => p.parse()?,
            None => Preset::Desk,
        };
        let mut cfg: Self = config::resolve(&Self::for_preset(preset), layer.as_ref(), overrides)?;
        cfg.apply_flags();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copies the ablation flags into the model config.
    pub fn apply_flags(&mut self) {
        self.model.depth.use_attention = self.attention_on;
        self.model.depth.use_ddv = self.ddv_on;
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: self.ssim_alpha,
            lambda: self.lambda,
            ..LossConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && 0.0 < self.lr_after_decay && self.lr_after_decay <= self.lr) {
            return Err(Error::Config("learning rates need 0 < lr_after_decay <= lr".into()));
        }
        if self.epochs > 0 && self.decay_epoch >= self.epochs {
            return Err(Error::Config(format!(
                "decay_epoch ({}) must be below epochs ({})",
                self.decay_epoch, self.epochs
            )));
        }
        let beta = |b: f64| (0.0..1.0).contains(&b);
        if !beta(self.adam_beta1) || !beta(self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam needs betas in [0, 1) and eps > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.static_threshold >= 0.0) {
            return Err(Error::Config("static_threshold must be non-negative".into()));
        }
        if self.model.depth.use_attention != self.attention_on || self.model.depth.use_ddv != self.ddv_on {
            return Err(Error::Config("ablation flags disagree with the model config".into()));
        }
        self.loss().validate()?;
        self.augmentation.validate()?;
        self.eval.validate()?;
        self.model.validate()
    }
}

/// Learning rate of a zero-based epoch: a single step decay.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.decay_epoch {
        cfg.lr
    } else {
        cfg.lr_after_decay
    }
}
