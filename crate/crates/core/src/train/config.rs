use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predict_update::AblationMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    EditTrain,
}

fn default_heldout_every() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Passes over the edit pairs (edit training).
    pub epochs: usize,
    /// Optimizer steps (pretraining).
    pub steps: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    pub ablation: AblationMode,
    pub log_every: usize,
    /// Pretraining steps between held-out evaluations.
    #[serde(default = "default_heldout_every")]
    pub heldout_every: usize,
    /// Use only the first `n` training pairs.
    #[serde(default)]
    pub max_pairs: Option<usize>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            phase: Phase::Pretrain,
            learning_rate: 3e-4,
            batch_size: 4,
            epochs: 0,
            steps: 3000,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            ablation: AblationMode::Full,
            log_every: 50,
            heldout_every: default_heldout_every(),
            max_pairs: None,
            checkpoint: None,
        }
    }

    pub fn edit() -> Self {
        Self {
            phase: Phase::EditTrain,
            learning_rate: 1e-5,
            batch_size: 16,
            epochs: 5,
            steps: 0,
            log_every: 25,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate {} must be finite and non-negative",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas {:?} must lie in [0, 1)", self.betas));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("eps must be positive".into());
        }
        if self.log_every == 0 || self.heldout_every == 0 {
            return bad("log_every and heldout_every must be at least 1".into());
        }
        Ok(())
    }
}
