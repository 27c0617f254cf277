//! Loss, optimiser, schedule, the training loop and the three protocols.

pub mod fit;
pub mod loss;
pub mod optim;
pub mod protocol;
pub mod schedule;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StiltError};

pub use fit::{fit, EarlyStopper, EpochRecord, FitOutcome, StageInput};
pub use loss::{weighted_ce_loss, LossWeights};
pub use optim::AdamW;
pub use protocol::{run_protocol, Prediction, ProtocolKind, ProtocolOutcome, ProtocolSpec};
pub use schedule::cosine_lr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopCriterion {
    MinValLoss,
    MaxValWeightedF1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub betas: [f64; 2],
    /// Decoupled weight decay.
    pub weight_decay: f64,
    pub eps: f64,
    pub amsgrad: bool,
    pub dropout: f64,
    pub patience: usize,
    pub early_stop_criterion: EarlyStopCriterion,
}

impl TrainConfig {
    /// Settings for training on memes.
    pub fn memes() -> Self {
        TrainConfig {
            lr_max: 5e-5,
            lr_min: 1.5e-5,
            max_epochs: 40,
            batch_size: 32,
            betas: [0.5, 0.9],
            weight_decay: 0.9,
            eps: 1e-8,
            amsgrad: false,
            dropout: 0.2,
            patience: 5,
            early_stop_criterion: EarlyStopCriterion::MinValLoss,
        }
    }

    /// Settings for the unimodal intermediate stage.
    pub fn unimodal() -> Self {
        TrainConfig {
            lr_max: 1e-5,
            lr_min: 5e-6,
            max_epochs: 60,
            early_stop_criterion: EarlyStopCriterion::MaxValWeightedF1,
            ..Self::memes()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StiltError::Config(m));
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return bad(format!(
                "need 0 < lr_min <= lr_max, got lr_min={} lr_max={}",
                self.lr_min, self.lr_max
            ));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.patience < 1 {
            return bad("patience must be >= 1".into());
        }
        if self.max_epochs < 1 {
            return bad("max_epochs must be >= 1".into());
        }
        if self.amsgrad {
            return bad("amsgrad is not supported".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return bad(format!("betas must lie in [0, 1), got {:?}", self.betas));
        }
        if !(self.weight_decay >= 0.0 && self.eps > 0.0) {
            return bad("weight_decay must be >= 0 and eps > 0".into());
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::memes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_defaults_validate() {
        TrainConfig::memes().validate().unwrap();
        TrainConfig::unimodal().validate().unwrap();
        assert_eq!(TrainConfig::unimodal().max_epochs, 60);
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            TrainConfig { batch_size: 1, ..TrainConfig::memes() },
            TrainConfig { patience: 0, ..TrainConfig::memes() },
            TrainConfig { lr_min: 1.0, ..TrainConfig::memes() },
            TrainConfig { amsgrad: true, ..TrainConfig::memes() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
