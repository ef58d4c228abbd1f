use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retriever::SelectionPolicy;

pub const STAGE1_LEARNING_RATE: f64 = 5e-6;
pub const STAGE2_LEARNING_RATE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// 1: retriever contrastive training, 2: sparse language-model training.
    pub stage: u8,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_accum_steps: usize,
    pub batch_size: usize,
    /// Optimizer updates.
    pub max_steps: usize,
    pub seed: u64,
    /// Stage-1 per-layer weights; `None` is the uniform mean.
    pub layer_loss_weights: Option<Vec<f64>>,
    /// Page selection while encoding: the attention pattern that produces
    /// the bookmark states in stage 1, the retrieval policy in stage 2.
    pub policy: SelectionPolicy,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self {
            stage: 1,
            learning_rate: STAGE1_LEARNING_RATE,
            weight_decay: 1e-2,
            grad_accum_steps: 16,
            batch_size: 1,
            max_steps: 1000,
            seed: 0,
            layer_loss_weights: None,
            policy: SelectionPolicy::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn stage2() -> Self {
        Self { stage: 2, learning_rate: STAGE2_LEARNING_RATE, ..Self::stage1() }
    }

    /// Examples consumed by one optimizer update.
    pub fn examples_per_step(&self) -> usize {
        self.grad_accum_steps * self.batch_size
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::InvalidConfig(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive, weight decay non-negative".into()));
        }
        if self.grad_accum_steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("grad_accum_steps and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::InvalidConfig("betas must lie in [0, 1) and eps be positive".into()));
        }
        if let Some(w) = &self.layer_loss_weights {
            if w.len() != n_layers || w.iter().any(|x| !(*x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "layer_loss_weights needs {n_layers} non-negative entries with a positive sum"
                )));
            }
        }
        self.policy.validate()
    }

    /// Normalized per-layer stage-1 weights.
    pub fn layer_weights(&self, n_layers: usize) -> Vec<f64> {
        match &self.layer_loss_weights {
            Some(w) => {
                let s: f64 = w.iter().sum();
                w.iter().map(|x| x / s).collect()
            }
            None => vec![1.0 / n_layers as f64; n_layers],
        }
    }
}
