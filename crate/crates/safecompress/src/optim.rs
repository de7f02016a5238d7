//! SGD and Adam parameter updates with sparsity-mask enforcement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// One named parameter scheduled for an update. `mask`, when present,
/// pins inactive positions to exactly zero.
pub struct ParamSlot<'a> {
    pub name: &'a str,
    pub tensor: &'a mut Tensor,
    pub mask: Option<&'a [bool]>,
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    step_count: u64,
    moments: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Optimizer {
            cfg,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Apply one update to every slot. Each tensor must carry a gradient;
    /// gradients are cleared afterwards and masked positions stay zero.
    pub fn step(&mut self, slots: &mut [ParamSlot<'_>]) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        for slot in slots.iter_mut() {
            let grad = slot
                .tensor
                .grad()
                .ok_or_else(|| Error::MissingGradient(slot.name.to_string()))?
                .to_vec();
            let n = grad.len();
            match self.cfg.kind {
                OptimizerKind::Sgd => {
                    let lr = self.cfg.learning_rate;
                    let wd = self.cfg.weight_decay;
                    let values = slot.tensor.values_mut();
                    for i in 0..n {
                        let g = grad[i] + wd * values[i];
                        values[i] -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let moments = self
                        .moments
                        .entry(slot.name.to_string())
                        .or_insert_with(|| Moments {
                            m: vec![0.0; n],
                            v: vec![0.0; n],
                        });
                    let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
                    let bc1 = 1.0 - b1.powi(t as i32);
                    let bc2 = 1.0 - b2.powi(t as i32);
                    let lr = self.cfg.learning_rate;
                    let eps = self.cfg.epsilon;
                    let wd = self.cfg.weight_decay;
                    let values = slot.tensor.values_mut();
                    for i in 0..n {
                        let g = grad[i] + wd * values[i];
                        moments.m[i] = b1 * moments.m[i] + (1.0 - b1) * g;
                        moments.v[i] = b2 * moments.v[i] + (1.0 - b2) * g * g;
                        let m_hat = moments.m[i] / bc1;
                        let v_hat = moments.v[i] / bc2;
                        values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                    // Pruned positions restart from clean state when regrown.
                    if let Some(mask) = slot.mask {
                        for i in 0..n {
                            if !mask[i] {
                                moments.m[i] = 0.0;
                                moments.v[i] = 0.0;
                            }
                        }
                    }
                }
            }
            if let Some(mask) = slot.mask {
                let values = slot.tensor.values_mut();
                for i in 0..n {
                    if !mask[i] {
                        values[i] = 0.0;
                    }
                }
            }
            slot.tensor.clear_grad();
        }
        Ok(())
    }
}
