use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn default_adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub l2_penalty: f64,
    pub batch_size: usize,
    /// Stop after this many epochs without validation improvement (when a
    /// trainer validates at all).
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 50,
            seed: 0,
            optimizer: OptimizerKind::default_adam(),
            l2_penalty: 0.0,
            batch_size: 64,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.l2_penalty >= 0.0) {
            return Err(Error::invalid("l2_penalty must be non-negative"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if let OptimizerKind::Adam {
            beta1,
            beta2,
            epsilon,
        } = self.optimizer
        {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(epsilon > 0.0) {
                return Err(Error::invalid("adam requires 0 <= beta < 1 and epsilon > 0"));
            }
        }
        Ok(())
    }
}

/// A model whose parameters can be visited as flat slices, in a fixed order.
pub trait Trainable<S> {
    fn params_mut(&mut self) -> Vec<&mut [S]>;
}

#[derive(Debug, Clone)]
struct Moments<S> {
    first: Vec<S>,
    second: Vec<S>,
}

/// SGD or Adam over the parameter slices of a [`Trainable`] model.
/// The L2 penalty is added to every parameter's gradient.
#[derive(Debug, Clone)]
pub struct Optimizer<S> {
    kind: OptimizerKind,
    learning_rate: S,
    l2: S,
    step: i32,
    moments: Vec<Moments<S>>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            kind: cfg.optimizer,
            learning_rate: S::lit(cfg.learning_rate),
            l2: S::lit(cfg.l2_penalty),
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step<M: Trainable<S> + ?Sized>(&mut self, model: &mut M, grads: &[&[S]]) -> Result<()> {
        let mut params = model.params_mut();
        check_dim("optimizer parameter groups", params.len(), grads.len())?;
        for (p, g) in params.iter().zip(grads) {
            check_dim("optimizer parameter group", p.len(), g.len())?;
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("optimizer gradient".into()));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &dw) in p.iter_mut().zip(g.iter()) {
                        *w -= self.learning_rate * (dw + self.l2 * *w);
                    }
                }
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                if self.moments.is_empty() {
                    self.moments = grads
                        .iter()
                        .map(|g| Moments {
                            first: vec![S::zero(); g.len()],
                            second: vec![S::zero(); g.len()],
                        })
                        .collect();
                }
                let (b1, b2, eps) = (S::lit(beta1), S::lit(beta2), S::lit(epsilon));
                let bias1 = S::one() - b1.powi(self.step);
                let bias2 = S::one() - b2.powi(self.step);
                for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.moments) {
                    for (k, (w, &dw)) in p.iter_mut().zip(g.iter()).enumerate() {
                        let dw = dw + self.l2 * *w;
                        m.first[k] = b1 * m.first[k] + (S::one() - b1) * dw;
                        m.second[k] = b2 * m.second[k] + (S::one() - b2) * dw * dw;
                        let m_hat = m.first[k] / bias1;
                        let v_hat = m.second[k] / bias2;
                        *w -= self.learning_rate * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
