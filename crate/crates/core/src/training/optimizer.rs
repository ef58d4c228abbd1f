use serde::{Deserialize, Serialize};

use crate::model::{FreezeMask, Gradients, ModelParams};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// One decoupled-weight-decay Adam update of a flat parameter slice.
/// `t` is the 1-based update count used for bias correction.
pub fn adamw_update(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    h: &AdamWHyper,
    decay: bool,
) {
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + h.eps);
        let wd = if decay { h.weight_decay * p[i] } else { 0.0 };
        p[i] -= h.learning_rate * (update + wd);
    }
}

/// AdamW state over every tensor of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub hyper: AdamWHyper,
    pub t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(params: &ModelParams, hyper: AdamWHyper) -> Self {
        let zeros = || params.tensors.iter().map(|t| Mat::zeros(t.value.rows, t.value.cols)).collect();
        Self { hyper, t: 0, m: zeros(), v: zeros() }
    }

    /// Update every trainable tensor. Frozen tensors are not touched at all,
    /// not even by weight decay. Decay applies only to projection and
    /// unembedding weights.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients, mask: &FreezeMask) {
        self.t += 1;
        for (id, tensor) in params.tensors.iter_mut().enumerate() {
            if !mask.is_trainable(id) {
                continue;
            }
            adamw_update(
                &mut tensor.value.data,
                &grads.tensors[id].data,
                &mut self.m[id].data,
                &mut self.v[id].data,
                self.t,
                &self.hyper,
                tensor.kind.decays(),
            );
        }
    }
}
