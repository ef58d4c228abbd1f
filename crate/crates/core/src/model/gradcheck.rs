//! Reverse-mode gradients and their finite-difference check.

use super::forward::{bind_params, ParamVars};
use super::params::FreezeMask;
use super::Model;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Gradient of every parameter tensor, by tensor id. Frozen tensors get
/// exact zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Mat>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            tensors: model.params.tensors.iter().map(|t| Mat::zeros(t.value.rows, t.value.cols)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.scale(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Mat::is_finite)
    }

    pub fn max_abs(&self, id: usize) -> f64 {
        self.tensors[id].data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Evaluate `loss_fn` on a fresh tape and backpropagate.
pub fn gradients<F>(model: &Model, mask: Option<&FreezeMask>, loss_fn: F) -> Result<(f64, Gradients)>
where
    F: FnOnce(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, &model.params, mask);
    let loss = loss_fn(&mut tape, &vars)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss is {value}")));
    }
    let mut grads = Gradients::zeros_like(model);
    for (id, g) in tape.backward(loss) {
        grads.tensors[id] = g;
    }
    Ok((value, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Tensor holding the worst entry.
    pub worst: String,
    pub checked: usize,
    /// Largest analytic gradient magnitude on a frozen tensor (zero when the
    /// mask is honoured).
    pub frozen_max_abs: f64,
}

/// Compare analytic gradients with central differences
/// `(L(θ+ε) - L(θ-ε)) / 2ε` on every trainable entry. The relative error of an
/// entry is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<F>(model: &Model, mask: Option<&FreezeMask>, epsilon: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamVars, &Model) -> Result<Var>,
{
    let (_, analytic) = gradients(model, mask, |t, v| loss_fn(t, v, model))?;
    let eval = |m: &Model| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = bind_params(&mut tape, &m.params, Some(&FreezeMask { trainable: Vec::new() }));
        let loss = loss_fn(&mut tape, &vars, m)?;
        Ok(tape.scalar(loss))
    };
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: String::new(), checked: 0, frozen_max_abs: 0.0 };
    let mut probe = model.clone();
    for (id, tensor) in model.params.tensors.iter().enumerate() {
        if mask.is_some_and(|m| !m.is_trainable(id)) {
            report.frozen_max_abs = report.frozen_max_abs.max(analytic.max_abs(id));
            continue;
        }
        for e in 0..tensor.value.data.len() {
            let orig = tensor.value.data[e];
            probe.params.get_mut(id).data[e] = orig + epsilon;
            let up = eval(&probe)?;
            probe.params.get_mut(id).data[e] = orig - epsilon;
            let down = eval(&probe)?;
            probe.params.get_mut(id).data[e] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic.tensors[id].data[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{}[{e}]", tensor.name);
            }
        }
    }
    Ok(report)
}
