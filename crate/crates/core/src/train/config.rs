use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, LrSchedule};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Root of every per-stage random stream.
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the last one.
    pub checkpoint_every: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Fraction of the batch-norm running statistics kept at each step.
    pub bn_momentum: f64,

    pub predictor_steps: u64,
    pub predictor_batch_size: usize,
    pub predictor_lr_init: f64,
    pub predictor_lr_final: f64,
    pub predictor_decay_start: u64,
    pub predictor_decay_end: u64,
    pub predictor_adam_eps: f64,
    pub l2_weight: f64,

    pub vocoder_steps: u64,
    pub vocoder_batch_size: usize,
    pub vocoder_lr: f64,
    pub vocoder_adam_eps: f64,
    pub ema_decay: f64,
    /// Audio samples per training crop; rounded down to whole frames.
    pub crop_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            checkpoint_every: 1000,
            grad_clip: 0.0,
            bn_momentum: 0.9,
            predictor_steps: 10_000,
            predictor_batch_size: 8,
            predictor_lr_init: 1e-3,
            predictor_lr_final: 1e-5,
            predictor_decay_start: 50_000,
            predictor_decay_end: 150_000,
            predictor_adam_eps: 1e-6,
            l2_weight: 1e-6,
            vocoder_steps: 10_000,
            vocoder_batch_size: 2,
            vocoder_lr: 1e-4,
            vocoder_adam_eps: 1e-8,
            ema_decay: 0.9999,
            crop_samples: 4800,
        }
    }
}

impl TrainConfig {
    pub fn predictor_schedule(&self) -> LrSchedule {
        LrSchedule {
            lr_init: self.predictor_lr_init,
            lr_final: self.predictor_lr_final,
            decay_start: self.predictor_decay_start,
            decay_end: self.predictor_decay_end,
        }
    }

    pub fn predictor_adam(&self) -> AdamConfig {
        AdamConfig {
            eps: self.predictor_adam_eps,
            l2_weight: self.l2_weight,
            ..AdamConfig::default()
        }
    }

    pub fn vocoder_adam(&self) -> AdamConfig {
        AdamConfig {
            eps: self.vocoder_adam_eps,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.predictor_batch_size == 0 || self.vocoder_batch_size == 0 {
            return Err(Error::Config("train batch sizes must be positive".into()));
        }
        if self.crop_samples == 0 {
            return Err(Error::Config("train.crop_samples must be positive".into()));
        }
        self.predictor_schedule().validate()?;
        if !(self.vocoder_lr > 0.0) {
            return Err(Error::Config("train.vocoder_lr must be positive".into()));
        }
        for (name, v) in [
            ("predictor_adam_eps", self.predictor_adam_eps),
            ("vocoder_adam_eps", self.vocoder_adam_eps),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("train.{name} must be positive")));
            }
        }
        for (name, v) in [("l2_weight", self.l2_weight), ("grad_clip", self.grad_clip)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be non-negative")));
            }
        }
        for (name, v) in [
            ("ema_decay", self.ema_decay),
            ("bn_momentum", self.bn_momentum),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("train.{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}
