//! Desk-scale training of stationary representations.
//!
//! A small dense network maps inputs to `d = K − 1` dimensional features that
//! are classified against the fixed simplex prototypes. Fine-tuning combines
//! the simplex cross-entropy with a contrastive term against the previous
//! model, mixes in a per-class replay memory, and supports swapping the
//! current model for an independently pre-trained one mid-sequence.

pub mod data;
pub mod losses;
pub mod network;
pub mod optim;
pub mod sequence;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use data::{make_synthetic_dataset, Dataset, ReplayMemory};
pub use losses::{hoc_loss, nce_loss, sce_loss, LossOutput, NceOptions, Reduction};
pub use network::{Checkpoint, LinearHead, Provenance, RepresentationModel};
pub use sequence::{run_sequence, SequenceStep, TaskSequence, TaskSpec};
pub use train::{train_er, train_model, EpochLoss, LossHistory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Hoc,
    SceOnly,
    ErBaseline,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Hoc => "hoc",
            Method::SceOnly => "sce_only",
            Method::ErBaseline => "er_baseline",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hoc" => Ok(Method::Hoc),
            "sce_only" | "sce" => Ok(Method::SceOnly),
            "er_baseline" | "er" => Ok(Method::ErBaseline),
            other => Err(Error::Invalid(format!("unknown method {other:?}"))),
        }
    }
}

/// Optimisation and loss settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HocConfig {
    pub lambda: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `(epoch, multiplier)`: from that (0-based) epoch on, the learning rate
    /// is multiplied by `multiplier`. Milestones compound.
    #[serde(default)]
    pub lr_schedule: Vec<(usize, f64)>,
    #[serde(default)]
    pub nce: NceOptions,
}

impl Default for HocConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            tau: 10.0,
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 30,
            batch_size: 128,
            lr_schedule: Vec::new(),
            nce: NceOptions::default(),
        }
    }
}

impl HocConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Invalid(format!("lambda {} not in [0, 1]", self.lambda)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Invalid(format!("tau {} must be positive", self.tau)));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Invalid(format!(
                "learning rate {} must be non-negative",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Invalid(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Invalid("weight decay must be non-negative".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Invalid("batch size must be at least 2".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .fold(self.learning_rate, |lr, (_, m)| lr * m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = HocConfig::default();
        c.validate().unwrap();
        assert_eq!((c.lambda, c.tau, c.learning_rate), (0.1, 10.0, 0.001));
    }

    #[test]
    fn rejects_out_of_range() {
        for bad in [
            HocConfig { lambda: 1.5, ..Default::default() },
            HocConfig { lambda: -0.1, ..Default::default() },
            HocConfig { tau: 0.0, ..Default::default() },
            HocConfig { momentum: 1.0, ..Default::default() },
            HocConfig { batch_size: 1, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn schedule_compounds() {
        let c = HocConfig {
            learning_rate: 1.0,
            lr_schedule: vec![(5, 0.1), (8, 0.1)],
            ..Default::default()
        };
        assert_eq!(c.lr_at(0), 1.0);
        assert!((c.lr_at(5) - 0.1).abs() < 1e-15);
        assert!((c.lr_at(9) - 0.01).abs() < 1e-15);
    }
}
