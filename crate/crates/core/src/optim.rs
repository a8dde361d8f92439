//! First-order optimizers over flat parameter slots.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(format!("unknown optimizer `{other}` (expected sgd or adam)")),
        }
    }
}

/// Optimizer hyperparameters plus Adam moments, one moment vector per slot.
///
/// A slot is any contiguous parameter block (a weight row, a bias vector, a
/// dense matrix). Moments are sized lazily on the first update of a slot.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Advance the step counter. Call once per optimization step, before the
    /// slot updates belonging to it.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Apply one update to `params` in place. The gradient must already have
    /// been checked with [`ensure_finite`].
    pub fn update(&mut self, slot: usize, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                if self.first.len() <= slot {
                    self.first.resize(slot + 1, Vec::new());
                    self.second.resize(slot + 1, Vec::new());
                }
                if self.first[slot].len() != params.len() {
                    self.first[slot] = vec![0.0; params.len()];
                    self.second[slot] = vec![0.0; params.len()];
                }
                let t = self.step.max(1) as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
                let m = &mut self.first[slot];
                let v = &mut self.second[slot];
                for k in 0..params.len() {
                    let g = grads[k];
                    m[k] = b1 * m[k] + (1.0 - b1) * g;
                    v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                    let m_hat = m[k] / c1;
                    let v_hat = v[k] / c2;
                    params[k] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

pub fn ensure_finite(what: &str, grads: &[f64]) -> Result<()> {
    match grads.iter().position(|g| !g.is_finite()) {
        Some(k) => Err(Error::NonFinite(format!(
            "{what} gradient at coordinate {k}: {}",
            grads[k]
        ))),
        None => Ok(()),
    }
}
