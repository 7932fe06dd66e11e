use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::MaskPolicy;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, DEFAULT_PROJECTION_DIM};

/// Distillation variant. Each mode is the next one with some weights or
/// steps zeroed: `no_kd < vanilla_kd < mate < cilda`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Cilda,
    Mate,
    VanillaKd,
    NoKd,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Cilda, Mode::Mate, Mode::VanillaKd, Mode::NoKd];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Cilda => "cilda",
            Mode::Mate => "mate",
            Mode::VanillaKd => "vanilla_kd",
            Mode::NoKd => "no_kd",
        }
    }

    pub fn uses_generator(self) -> bool {
        matches!(self, Mode::Cilda | Mode::Mate)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("mode", format!("unknown mode `{s}` (cilda, mate, vanilla_kd, no_kd)")))
    }
}

/// How generator and student updates interleave.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `n_g` generator updates on their own batch stream, then the next `n_s`
    /// student batches of the epoch stream; rounds run across epoch ends.
    Block,
    /// `n_g` generator then `n_s` student updates on every single batch.
    PerBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DevMetric {
    Accuracy,
    MacroF1,
    Mcc,
}

impl DevMetric {
    pub fn pick(self, report: &crate::evalkit::MetricReport) -> f64 {
        match self {
            DevMetric::Accuracy => report.accuracy,
            DevMetric::MacroF1 => report.macro_f1,
            DevMetric::Mcc => report.mcc,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub schedule: Schedule,
    pub n_g: usize,
    pub n_s: usize,
    pub epochs: usize,
    pub lr_g: f64,
    pub lr_s: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub projection_dim: usize,
    pub dev_metric: DevMetric,
    /// Per-epoch multiplicative decay of the Gumbel temperature (1 = none).
    pub gumbel_decay: f64,
    pub gumbel_tau_min: f64,
    pub weights: LossWeights,
    pub mask: MaskPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Cilda,
            schedule: Schedule::Block,
            n_g: 10,
            n_s: 100,
            epochs: 20,
            lr_g: 1e-3,
            lr_s: 1e-3,
            batch_size: 32,
            patience: 5,
            seed: 0,
            clip_norm: 1.0,
            projection_dim: DEFAULT_PROJECTION_DIM,
            dev_metric: DevMetric::Accuracy,
            gumbel_decay: 1.0,
            gumbel_tau_min: 0.1,
            weights: LossWeights::default(),
            mask: MaskPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_s == 0 {
            return Err(Error::config("n_s", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        for (field, v) in [("lr_g", self.lr_g), ("lr_s", self.lr_s), ("clip_norm", self.clip_norm)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.projection_dim == 0 {
            return Err(Error::config("projection_dim", "must be positive"));
        }
        if !(self.gumbel_decay > 0.0 && self.gumbel_decay <= 1.0) {
            return Err(Error::config("gumbel_decay", "must lie in (0, 1]"));
        }
        if !(self.gumbel_tau_min > 0.0) {
            return Err(Error::config("gumbel_tau_min", "must be positive"));
        }
        self.weights.validate()?;
        self.mask.validate()
    }

    /// Copy with the mode's zeroed weights and steps applied.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let w = &mut c.weights;
        if c.mode != Mode::Cilda {
            w.alpha2 = 0.0;
            w.lambda3 = 0.0;
        }
        if !c.mode.uses_generator() {
            w.lambda2_aug = 0.0;
            c.n_g = 0;
        }
        if c.mode == Mode::NoKd {
            w.lambda2 = 0.0;
        }
        c
    }

    pub fn gumbel_tau(&self, epoch: u64) -> f64 {
        (self.weights.gumbel_tau * self.gumbel_decay.powi(epoch as i32)).max(self.gumbel_tau_min.min(self.weights.gumbel_tau))
    }
}

/// Plain supervised training (teacher fine-tuning).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub clip_norm: f64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self { epochs: 20, lr: 1e-3, batch_size: 32, patience: 5, seed: 0, clip_norm: 1.0 }
    }
}

impl SupervisedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("teacher.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("teacher.batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::config("teacher.lr", "learning rate and clip norm must be positive"));
        }
        Ok(())
    }
}

/// Masked-LM warm-up of the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub mask: MaskPolicy,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self { steps: 200, lr: 1e-3, batch_size: 32, seed: 0, clip_norm: 1.0, mask: MaskPolicy::default() }
    }
}
