//! Momentum SGD with weight decay and a step-decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grad::GradientVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Iterations after which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_milestones: Vec<u64>,
    pub lr_decay_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.2,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_milestones: Vec::new(),
            lr_decay_factor: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("optimizer.lr", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("optimizer.momentum", "must be in [0,1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid("optimizer.weight_decay", "must be >= 0"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(invalid("optimizer.lr_decay_factor", "must be in (0,1]"));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid(
                "optimizer.lr_milestones",
                "must be strictly increasing",
            ));
        }
        Ok(())
    }

    /// Learning rate in effect at 1-based `iteration`.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        let drops = self
            .lr_milestones
            .iter()
            .filter(|&&m| iteration > m)
            .count();
        self.lr
            * self
                .lr_decay_factor
                .powi(drops.min(i32::MAX as usize) as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    config: OptimizerConfig,
    weights: Vec<f32>,
    buffer: Vec<f32>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, weights: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let buffer = vec![0.0; weights.len()];
        Ok(Self {
            config,
            weights,
            buffer,
        })
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn buffer(&self) -> &[f32] {
        &self.buffer
    }

    pub fn into_weights(self) -> Vec<f32> {
        self.weights
    }

    /// `buf ← µ·buf + (g + wd·w)`, `w ← w − η·buf`.
    pub fn sgd_update(&mut self, g: &GradientVector, iteration: u64) -> Result<()> {
        g.ensure_len(self.weights.len())?;
        let lr = self.config.lr_at(iteration);
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        for ((w, b), &gi) in self
            .weights
            .iter_mut()
            .zip(&mut self.buffer)
            .zip(g.values())
        {
            let d = f64::from(gi) + wd * f64::from(*w);
            let nb = mu * f64::from(*b) + d;
            *b = nb as f32;
            *w = (f64::from(*w) - lr * nb) as f32;
        }
        Ok(())
    }
}
