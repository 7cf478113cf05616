//! First-order optimizers over named parameters.
//!
//! Weight decay is L2: `decay · w` is added to the gradient before the
//! update. Parameters without a gradient are left untouched bit for bit.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::SgdMomentum => "sgd-momentum",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd-momentum" | "sgd_momentum" | "sgd" => Ok(OptimizerKind::SgdMomentum),
            other => Err(Error::config(format!("unknown optimizer '{other}' (expected adam or sgd-momentum)"))),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const SGD_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    step: u64,
    /// First moment (Adam) or velocity (SGD).
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::config(format!("weight decay must be non-negative, got {weight_decay}")));
        }
        Ok(Optimizer {
            kind,
            lr,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter named in `grads`.
    pub fn apply(&mut self, state: &mut ModelState, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let mut missing = None;
        let mut touched = 0;
        state.for_each_named_mut(&mut |name, w| {
            let Some(g) = grads.get(name) else { return };
            if g.shape() != w.shape() {
                missing.get_or_insert_with(|| format!("gradient for {name} has shape {:?}", g.shape()));
                return;
            }
            touched += 1;
            let n = w.numel();
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    for ((wi, &gi), mi) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        let gi = gi + self.weight_decay * *wi;
                        *mi = SGD_MOMENTUM * *mi + gi;
                        *wi -= self.lr * *mi;
                    }
                }
                OptimizerKind::Adam => {
                    let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
                    let c1 = 1.0 - ADAM_BETA1.powi(t);
                    let c2 = 1.0 - ADAM_BETA2.powi(t);
                    for (((wi, &gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let gi = gi + self.weight_decay * *wi;
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                        *wi -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        });
        if let Some(msg) = missing {
            return Err(Error::dim(msg));
        }
        if touched != grads.len() {
            return Err(Error::dim(format!(
                "{} gradients given, {touched} matched parameters",
                grads.len()
            )));
        }
        Ok(())
    }
}
