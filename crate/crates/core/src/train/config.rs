use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{AugmentConfig, Normalization, DEFAULT_IGNORE_ID};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_head: f64,
    /// Learning rate reached in the final epoch.
    pub lr_min: f64,
    pub weight_decay: f64,
    /// Encoder learning rate and weight decay are the head values divided by this.
    pub encoder_lr_divisor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Training crop `(height, width)`.
    pub crop: (usize, usize),
    pub scale_range: (f64, f64),
    pub hflip_prob: f64,
    /// Random scale/flip/crop; when off, samples are used as stored.
    pub augment: bool,
    /// Apply weight decay directly to the weights instead of through the gradient.
    pub decoupled_weight_decay: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ignore_id: u8,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<u64>,
    pub model: ModelConfig,
    pub normalization: Normalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_head: 5e-4,
            lr_min: 5e-6,
            weight_decay: 1e-4,
            encoder_lr_divisor: 4.0,
            epochs: 100,
            batch_size: 6,
            seed: 0,
            crop: (512, 512),
            scale_range: (0.5, 2.0),
            hflip_prob: 0.5,
            augment: true,
            decoupled_weight_decay: false,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            ignore_id: DEFAULT_IGNORE_ID,
            max_steps: None,
            model: ModelConfig::resnet18(3),
            normalization: Normalization::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_head && self.lr_head.is_finite()) {
            return bad(format!(
                "need 0 < lr_min ≤ lr_head, got lr_min={} lr_head={}",
                self.lr_min, self.lr_head
            ));
        }
        if !(self.encoder_lr_divisor > 0.0 && self.encoder_lr_divisor.is_finite()) {
            return bad(format!(
                "encoder_lr_divisor must be > 0, got {}",
                self.encoder_lr_divisor
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight_decay must be ≥ 0, got {}",
                self.weight_decay
            ));
        }
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.adam_eps <= 0.0
        {
            return bad("Adam needs 0 ≤ β < 1 and ε > 0".into());
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be ≥ 1 when set".into());
        }
        if self.augment {
            let (h, w) = self.crop;
            if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
                return bad(format!("crop {h}×{w} must be a positive multiple of 32"));
            }
            self.augment_config().validate()?;
        }
        if self.normalization.std.iter().any(|&s| s <= 0.0) {
            return bad("normalization std must be positive".into());
        }
        self.model.validate()
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            scale_range: self.scale_range,
            hflip_prob: self.hflip_prob,
            crop: self.crop,
            ignore_id: self.ignore_id,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Learning rate and weight decay of the encoder group.
    pub fn encoder_weight_decay(&self) -> f64 {
        self.weight_decay / self.encoder_lr_divisor
    }
}

/// Cosine-annealed `(head, encoder)` learning rates for `epoch`.
///
/// `lr(e) = lr_min + ½(lr_head − lr_min)(1 + cos(π·e/(epochs−1)))`, so the
/// first epoch runs at `lr_head` and the last at `lr_min`. A single-epoch run
/// uses `lr_head`.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> Result<(f64, f64)> {
    if epoch >= cfg.epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside 0..{}",
            cfg.epochs
        )));
    }
    let head = if cfg.epochs == 1 {
        cfg.lr_head
    } else {
        let t = epoch as f64 / (cfg.epochs - 1) as f64;
        cfg.lr_min + 0.5 * (cfg.lr_head - cfg.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
    };
    Ok((head, head / cfg.encoder_lr_divisor))
}
