//! Parameter update rules: plain SGD and bias-corrected Adam.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::NnError;

/// Optimizer choice surfaced in configs and reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(OptimizerKind::Sgd),
            "adam" => Some(OptimizerKind::Adam),
            _ => None,
        }
    }
}

struct AdamSlot {
    m: Tensor,
    v: Tensor,
}

pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    slots: Vec<AdamSlot>,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            step: 0,
            slots: Vec::new(),
        }
    }

    /// Adam with the standard defaults: beta1 0.9, beta2 0.999, eps 1e-8.
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(lr),
            OptimizerKind::Adam => Self::adam(lr),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Applies one update. `params` and `grads` must be index-aligned and
    /// shape-matched; Adam moment buffers are allocated on the first step.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<(), NnError> {
        if params.len() != grads.len() {
            return Err(NnError::ShapeMismatch(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(NnError::ShapeMismatch(format!(
                    "parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= self.lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.slots.is_empty() {
                    self.slots = params
                        .iter()
                        .map(|p| AdamSlot {
                            m: Tensor::zeros(p.shape()),
                            v: Tensor::zeros(p.shape()),
                        })
                        .collect();
                } else if self.slots.len() != params.len() {
                    return Err(NnError::ShapeMismatch(format!(
                        "optimizer holds {} moment slots but got {} parameters",
                        self.slots.len(),
                        params.len()
                    )));
                }
                self.step += 1;
                let bc1 = 1.0 - self.beta1.powi(self.step as i32);
                let bc2 = 1.0 - self.beta2.powi(self.step as i32);
                for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut self.slots) {
                    for (((pv, gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(slot.m.data_mut())
                        .zip(slot.v.data_mut())
                    {
                        *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                        *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                        let m_hat = *mv / bc1;
                        let v_hat = *vv / bc2;
                        *pv -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
