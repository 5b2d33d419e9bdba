//! SGD with momentum and L2 weight decay folded into the gradient.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NetworkPartition;
use crate::nn::ParamKind;
use crate::scalar::Scalar;

/// Training stage an optimizer configuration belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    Distill,
    Frozen,
    Finetune,
    Normal,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Distill => "DISTILL",
            Stage::Frozen => "FROZEN",
            Stage::Finetune => "FINETUNE",
            Stage::Normal => "NORMAL",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "DISTILL" => Ok(Stage::Distill),
            "FROZEN" => Ok(Stage::Frozen),
            "FINETUNE" => Ok(Stage::Finetune),
            "NORMAL" => Ok(Stage::Normal),
            other => Err(Error::InvalidArgument(format!("unknown stage `{other}`"))),
        }
    }
}

pub const DEFAULT_WEIGHT_DECAY: f64 = 3e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub stage: Stage,
}

impl OptimizerSpec {
    /// Stage defaults: distillation 3e-3 / 0.99, frozen and normal training
    /// 1e-2 / 0.9, fine-tuning 5e-5 / 0.99, decay 3e-3 throughout.
    pub fn default_for(stage: Stage) -> Self {
        let (learning_rate, momentum) = match stage {
            Stage::Distill => (3e-3, 0.99),
            Stage::Frozen | Stage::Normal => (1e-2, 0.9),
            Stage::Finetune => (5e-5, 0.99),
        };
        Self { learning_rate, momentum, weight_decay: DEFAULT_WEIGHT_DECAY, stage }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!("weight decay must be nonnegative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Momentum buffers keyed by parameter name.
///
/// One step on an unfrozen trainable parameter `w` with gradient `g`:
/// `v <- momentum * v + (g + weight_decay * w)`, then `w <- w - lr * v`.
/// Buffers and parameters of frozen partitions are skipped entirely.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub spec: OptimizerSpec,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(spec: OptimizerSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, velocity: BTreeMap::new() })
    }

    pub fn step(&mut self, net: &mut NetworkPartition<T>) {
        let lr = T::lit(self.spec.learning_rate);
        let mu = T::lit(self.spec.momentum);
        let wd = T::lit(self.spec.weight_decay);
        let frozen = net.frozen_labels();
        let velocity = &mut self.velocity;
        net.for_each_param_mut(|key, label, p| {
            if p.kind != ParamKind::Trainable || frozen.contains(&label) {
                return;
            }
            let v = velocity.entry(key.to_string()).or_insert_with(|| vec![T::zero(); p.value.len()]);
            for ((w, &g), vi) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *vi = mu * *vi + g + wd * *w;
                *w = *w - lr * *vi;
            }
        });
    }
}
