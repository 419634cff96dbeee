use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimizer, schedule and batching settings for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Tokens per training window (targets are the next `seq_len` tokens).
    pub seq_len: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm cap on gradients; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Metrics are logged every `eval_every` steps and at the last step.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            seq_len: 128,
            peak_lr: 3e-4,
            min_lr: 3e-5,
            warmup_steps: 100,
            betas: [0.9, 0.95],
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 10,
        }
    }
}

impl TrainConfig {
    /// Settings used for the synthetic induction task.
    pub fn induction() -> Self {
        Self {
            steps: 5000,
            batch_size: 16,
            seq_len: 32,
            peak_lr: 2e-3,
            min_lr: 2e-4,
            warmup_steps: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps > 0 && self.warmup_steps >= self.steps {
            return Err(Error::config("warmup_steps", "must be smaller than steps"));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.peak_lr) {
            return Err(Error::config("min_lr", "need 0 <= min_lr <= peak_lr"));
        }
        for (i, b) in self.betas.iter().enumerate() {
            if !(0.0..1.0).contains(b) {
                return Err(Error::config(if i == 0 { "betas[0]" } else { "betas[1]" }, "must lie in [0, 1)"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.seq_len == 0 {
            return Err(Error::config("seq_len", "must be positive"));
        }
        if self.eps <= 0.0 {
            return Err(Error::config("eps", "must be positive"));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::config("weight_decay", "must be a finite non-negative number"));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::config("grad_clip", "must be non-negative"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be positive"));
        }
        Ok(())
    }
}
