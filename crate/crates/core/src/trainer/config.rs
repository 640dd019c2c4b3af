use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::RendererConfig;
use crate::objectives::{GanMode, LossWeights, MsSsimConfig, VggConfig};
use crate::wireframe::AugmentParams;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay_rate: f64,
    pub lr_decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Write `ckpt_eNNNN.bin` every this many epochs (and after the last).
    pub checkpoint_every: usize,
    /// Score the test split every this many epochs for `best.bin`.
    pub validate_every: usize,
    /// Threads used to augment a batch.
    pub workers: usize,
    pub gan_mode: GanMode,
    pub weights: LossWeights,
    pub ms_ssim: MsSsimConfig,
    pub perceptual: VggConfig,
    pub augment: AugmentParams,
    pub model: RendererConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            lr_decay_rate: 0.5,
            lr_decay_every: 30,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 16,
            max_epochs: 500,
            seed: 0,
            checkpoint_every: 10,
            validate_every: 5,
            workers: 1,
            gan_mode: GanMode::Lsgan,
            weights: LossWeights::default(),
            ms_ssim: MsSsimConfig::default(),
            perceptual: VggConfig::default(),
            augment: AugmentParams::default(),
            model: RendererConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Narrow model and perceptual trunk for CPU smoke runs.
    pub fn toy() -> Self {
        Self {
            batch_size: 4,
            checkpoint_every: 1,
            perceptual: VggConfig::toy(),
            model: RendererConfig::toy(),
            ..Default::default()
        }
    }

    /// Same schedule shape at a tenth of the learning rate, for runs where
    /// the default diverges.
    pub fn fallback(self) -> Self {
        Self { lr: 2e-4, ..self }
    }

    /// `lr * rate^floor(epoch / every)`, epochs counted from 0.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_rate.powi((epoch / self.lr_decay_every) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.lr_decay_every == 0 || self.checkpoint_every == 0 || self.validate_every == 0 {
            return Err(Error::Config("epoch intervals must be at least 1".into()));
        }
        if self.augment.crop_to != self.model.input_size {
            return Err(Error::Config(format!(
                "augment.crop_to ({}) must equal model.input_size ({})",
                self.augment.crop_to, self.model.input_size
            )));
        }
        if self.augment.crop_to > self.augment.resize_to {
            return Err(Error::Config("augment.crop_to must not exceed augment.resize_to".into()));
        }
        if self.ms_ssim.min_size() > self.model.input_size {
            return Err(Error::Config(format!(
                "ms_ssim with {} scales needs inputs of at least {}",
                self.ms_ssim.scales,
                self.ms_ssim.min_size()
            )));
        }
        self.weights.validate()?;
        self.model.validate()
    }

    /// Reads TOML (`.toml`) or JSON (anything else).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        } else {
            Ok(serde_json::from_str(&text)?)
        }
    }
}
