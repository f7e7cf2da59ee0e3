use std::collections::BTreeMap;

use autograd::{Element, Gradients, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Param;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adamw,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// SGD only.
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            momentum: 0.9,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.momentum);
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Per-parameter moment buffers (`v` is unused by SGD).
#[derive(Debug, Clone)]
pub struct Slot<E> {
    pub m: Tensor<E>,
    pub v: Tensor<E>,
}

/// AdamW with decoupled weight decay, or SGD with momentum. State is keyed
/// by parameter name so it survives checkpoints and pruning.
#[derive(Debug, Clone)]
pub struct Optimizer<E> {
    pub config: OptimizerConfig,
    pub step: u64,
    pub slots: BTreeMap<String, Slot<E>>,
}

impl<E: Element> Optimizer<E> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            slots: BTreeMap::new(),
        })
    }

    /// Applies one update to every parameter that received a gradient;
    /// parameters absent from `grads` (e.g. masked branches) stay frozen.
    /// Nothing is modified if any gradient is non-finite.
    pub fn apply(&mut self, params: Vec<&mut Param<E>>, grads: &Gradients<E>) -> Result<()> {
        for p in &params {
            if let Some(g) = grads.param(p.id) {
                if g.shape() != p.value.shape() {
                    return Err(Error::Config(format!(
                        "gradient shape {:?} for {} of shape {:?}",
                        g.shape(),
                        p.name,
                        p.value.shape()
                    )));
                }
                if g.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("gradient of {}", p.name)));
                }
            }
        }
        self.step += 1;
        let c = self.config.clone();
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for p in params {
            let Some(g) = grads.param(p.id) else { continue };
            let slot = self.slots.entry(p.name.clone()).or_insert_with(|| Slot {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
            });
            let theta = p.value.data_mut();
            let m = slot.m.data_mut();
            let v = slot.v.data_mut();
            match c.kind {
                OptimizerKind::Adamw => {
                    for i in 0..theta.len() {
                        let gi = g.data()[i].as_f64();
                        let th = theta[i].as_f64();
                        let mi = c.beta1 * m[i].as_f64() + (1.0 - c.beta1) * gi;
                        let vi = c.beta2 * v[i].as_f64() + (1.0 - c.beta2) * gi * gi;
                        m[i] = E::lit(mi);
                        v[i] = E::lit(vi);
                        let update = (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                        theta[i] = E::lit(th - c.lr * update - c.lr * c.weight_decay * th);
                    }
                }
                OptimizerKind::Sgd => {
                    for i in 0..theta.len() {
                        let th = theta[i].as_f64();
                        let d = g.data()[i].as_f64() + c.weight_decay * th;
                        let mi = c.momentum * m[i].as_f64() + d;
                        m[i] = E::lit(mi);
                        theta[i] = E::lit(th - c.lr * mi);
                    }
                }
            }
        }
        Ok(())
    }

    /// Drops buffers of parameters that no longer exist.
    pub fn retain(&mut self, live: &[&Param<E>]) {
        let names: std::collections::BTreeSet<&str> = live.iter().map(|p| p.name.as_str()).collect();
        self.slots.retain(|k, _| names.contains(k.as_str()));
    }
}
