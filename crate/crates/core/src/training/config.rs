use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::optim::OptimizerKind;
use crate::config::Section;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Cross-entropy on the all-standard model.
    Pretrain,
    /// Distills next-layer attention maps into the selectors; backbone frozen.
    Selector,
    /// Cross-entropy through the selective schedule; selectors frozen.
    Finetune,
    /// Per-patch regression head on a frozen backbone.
    Dense,
}

impl Phase {
    /// Pipeline order.
    pub const ALL: [Phase; 4] = [Phase::Pretrain, Phase::Selector, Phase::Finetune, Phase::Dense];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Selector => "selector",
            Phase::Finetune => "finetune",
            Phase::Dense => "dense",
        }
    }

    pub fn loss(self) -> LossKind {
        match self {
            Phase::Pretrain | Phase::Finetune => LossKind::CrossEntropy,
            Phase::Selector => LossKind::Kld,
            Phase::Dense => LossKind::Mse,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown phase '{s}' (expected pretrain, selector, finetune or dense)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    Kld,
    Mse,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::CrossEntropy => "cross-entropy",
            LossKind::Kld => "kld",
            LossKind::Mse => "mse",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross-entropy" | "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            "kld" | "kl" => Ok(LossKind::Kld),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::config(format!("unknown loss '{other}' (expected cross-entropy, kld or mse)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub loss: LossKind,
}

impl TrainConfig {
    /// Adam at 1e-3 for the selector and dense phases, 3e-4 otherwise.
    pub fn defaults(phase: Phase) -> Self {
        let (epochs, lr) = match phase {
            Phase::Pretrain => (30, 3e-4),
            Phase::Selector => (10, 1e-3),
            Phase::Finetune => (5, 3e-4),
            Phase::Dense => (20, 1e-3),
        };
        TrainConfig {
            phase,
            epochs,
            batch_size: 32,
            lr,
            weight_decay: 0.0,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            loss: phase.loss(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config(format!("[{}] epochs and batch_size must be positive", self.phase)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("[{}] lr must be positive, got {}", self.phase, self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("[{}] weight_decay must be non-negative", self.phase)));
        }
        if self.loss != self.phase.loss() {
            return Err(Error::config(format!(
                "[{}] loss '{}' does not fit this phase (expected '{}')",
                self.phase,
                self.loss,
                self.phase.loss()
            )));
        }
        Ok(())
    }

    pub fn to_section(&self) -> Section {
        let mut s = Section::new(self.phase.as_str());
        s.push("epochs", self.epochs);
        s.push("batch_size", self.batch_size);
        s.push("lr", self.lr);
        s.push("weight_decay", self.weight_decay);
        s.push("optimizer", self.optimizer);
        s.push("seed", self.seed);
        s.push("loss", self.loss);
        s
    }

    /// Reads a phase section (named after the phase) over `base`.
    pub fn from_section(section: &Section, base: &TrainConfig) -> Result<Self> {
        let mut r = section.reader();
        let cfg = TrainConfig {
            phase: base.phase,
            epochs: r.or("epochs", base.epochs)?,
            batch_size: r.or("batch_size", base.batch_size)?,
            lr: r.or("lr", base.lr)?,
            weight_decay: r.or("weight_decay", base.weight_decay)?,
            optimizer: r.or("optimizer", base.optimizer)?,
            seed: r.or("seed", base.seed)?,
            loss: r.or("loss", base.loss)?,
        };
        let checked = cfg.validate();
        if let Err(e) = checked {
            let key = if cfg.loss != cfg.phase.loss() {
                "loss"
            } else if cfg.epochs == 0 {
                "epochs"
            } else if cfg.batch_size == 0 {
                "batch_size"
            } else if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
                "lr"
            } else {
                "weight_decay"
            };
            return Err(match section.get(key) {
                Some(_) => r.reject(key, e),
                None => e,
            });
        }
        r.finish()?;
        Ok(cfg)
    }
}
