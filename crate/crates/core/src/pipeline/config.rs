//! Distillation run configuration, loadable from a flat TOML file. Unknown
//! keys are rejected so typos fail loudly instead of silently using a
//! default.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config: {what}")]
    Invalid { what: String },
}

/// Hyperparameters of one prompt-distillation run. Serialized flat so config
/// files stay greppable.
#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Training epochs (also the cosine horizon when `t_max == 0`).
    pub epochs: usize,
    /// Samples per batch; batches are class-balanced, so this must be a
    /// multiple of the class count at run time.
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr0: f32,
    /// Decoupled weight decay on prompt parameters (never on the weighting
    /// log-variances).
    pub weight_decay: f32,
    /// Cosine schedule horizon in epochs; `0` means "use `epochs`".
    pub t_max: usize,
    /// Cosine floor learning rate.
    pub eta_min: f32,
    /// Contrastive temperature.
    pub tau: f32,
    /// Confidence gate: a sample passes a teacher's gate when the true class
    /// ranks in the teacher's top-k.
    pub k: usize,
    /// Learnable point-prompt rows joining the pooled set.
    pub m_p: usize,
    /// Learnable text-context rows prepended to class tokens.
    pub m_t: usize,
    /// Lower clamp for the per-teacher weighting log-variances.
    pub lambda_min: f32,
    /// Fraction of each batch replaced by adversarial twins.
    pub mix_fraction: f32,
    /// L∞ budget of the training-time attack; the default sits above the
    /// evaluation budget so the learned robustness carries a margin.
    pub mix_epsilon: f32,
    /// Steps of the training-time attack.
    pub mix_steps: usize,
    /// Step size of the training-time attack.
    pub mix_alpha: f32,
    /// Depth views rendered for the image teacher (2, 4, or 6).
    pub views: usize,
    /// Depth resolution for the image teacher.
    pub resolution: usize,
    /// Run seed; everything downstream derives from it.
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            lr0: 1e-3,
            weight_decay: 1e-2,
            t_max: 0,
            eta_min: 1e-5,
            tau: 0.07,
            k: 1,
            m_p: 10,
            m_t: 3,
            lambda_min: -1.0,
            mix_fraction: 0.75,
            mix_epsilon: 0.075,
            mix_steps: 20,
            mix_alpha: 0.01,
            views: 6,
            resolution: 32,
            seed: 0,
        }
    }
}

impl DistillConfig {
    /// Effective cosine horizon.
    pub fn horizon(&self) -> usize {
        if self.t_max == 0 {
            self.epochs
        } else {
            self.t_max
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let complain = |cond: bool, what: &str| {
            if cond {
                Err(ConfigError::Invalid {
                    what: what.to_string(),
                })
            } else {
                Ok(())
            }
        };
        complain(self.epochs == 0, "epochs must be >= 1")?;
        complain(self.batch_size == 0, "batch_size must be >= 1")?;
        complain(self.lr0 <= 0.0, "lr0 must be > 0")?;
        complain(self.eta_min < 0.0, "eta_min must be >= 0")?;
        complain(self.eta_min > self.lr0, "eta_min must not exceed lr0")?;
        complain(self.weight_decay < 0.0, "weight_decay must be >= 0")?;
        complain(self.tau <= 0.0, "tau must be > 0")?;
        complain(self.k == 0, "k must be >= 1")?;
        complain(
            !(0.0..=1.0).contains(&self.mix_fraction),
            "mix_fraction must be in [0, 1]",
        )?;
        complain(self.mix_epsilon < 0.0, "mix_epsilon must be >= 0")?;
        complain(self.mix_alpha < 0.0, "mix_alpha must be >= 0")?;
        complain(
            !matches!(self.views, 2 | 4 | 6),
            "views must be 2, 4, or 6",
        )?;
        complain(self.resolution < 4, "resolution must be >= 4")?;
        complain(
            self.horizon() < self.epochs,
            "t_max must be 0 or >= epochs",
        )?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("flat struct serializes")
    }
}
