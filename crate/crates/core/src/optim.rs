//! First-order update rules for the trainable parameter blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PolicyGrad, PolicyParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Global L2 norm the gradient is rescaled to when it exceeds it.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Sgd, learning_rate: 0.1, clip_norm: 1.0, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self, section: &str) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("{section}.{m}")));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return err(format!("learning_rate: {} is not a non-negative number", self.learning_rate));
        }
        if !(self.clip_norm > 0.0) {
            return err(format!("clip_norm: {} must be positive", self.clip_norm));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("beta1/beta2: must lie in [0, 1)".into());
        }
        if !(self.epsilon > 0.0) {
            return err("epsilon: must be positive".into());
        }
        Ok(())
    }
}

/// Stateful optimizer over the six trainable blocks.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &PolicyParams) -> Self {
        let n = match config.kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam => params.num_trainable(),
        };
        Self { config, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Applies one update. Returns the gradient norm before clipping.
    /// A non-finite gradient aborts without touching `params`.
    pub fn step(&mut self, params: &mut PolicyParams, grad: &PolicyGrad) -> Result<f64> {
        grad.check_finite()?;
        let norm = grad.norm();
        let clip = if norm > self.config.clip_norm { self.config.clip_norm / norm } else { 1.0 };
        let lr = self.config.learning_rate;
        if lr == 0.0 {
            return Ok(norm);
        }
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.trainable_slices_mut().into_iter().zip(grad.blocks()) {
                    for (pi, gi) in p.iter_mut().zip(g) {
                        *pi -= lr * clip * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let OptimizerConfig { beta1, beta2, epsilon, .. } = self.config;
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                let mut k = 0;
                for (p, g) in params.trainable_slices_mut().into_iter().zip(grad.blocks()) {
                    for (pi, gi) in p.iter_mut().zip(g) {
                        let gi = gi * clip;
                        self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * gi;
                        self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * gi * gi;
                        *pi -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + epsilon);
                        k += 1;
                    }
                }
            }
        }
        Ok(norm)
    }
}
