//! Stage 1: contrastive training of the bookmark path with a frozen backbone.
//! Stage 2: language-model training with retrieval-selected sparse attention.

mod config;
mod optimizer;

pub use config::{TrainConfig, STAGE1_LEARNING_RATE, STAGE2_LEARNING_RATE};
pub use optimizer::{adamw_update, AdamW, AdamWHyper};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{
    bind_params, forward_tape, gradients, lm_targets, FreezeMask, Gradients, Model, ParamVars, SelectionPlan,
};
use crate::paging::AugmentedSequence;
use crate::tensor::log_sum_exp;

/// A training record for either stage.
#[derive(Clone, Debug, PartialEq)]
pub enum Example {
    /// The final page is the query; `positive_page` indexes an earlier page.
    Pairwise { seq: AugmentedSequence, positive_page: usize },
    /// Language modelling over normal tokens whose position is at least
    /// `loss_from`. `plan` overrides the retrieval plan of the config.
    Text { seq: AugmentedSequence, loss_from: usize, plan: Option<SelectionPlan> },
}

impl Example {
    pub fn text(seq: AugmentedSequence) -> Self {
        Example::Text { seq, loss_from: 0, plan: None }
    }
}

/// `-log softmax(scores)[positive]`.
pub fn contrastive_loss(scores: &[f64], positive: usize) -> Result<f64> {
    if positive >= scores.len() {
        return Err(Error::Label(format!("positive page {positive} outside {} candidates", scores.len())));
    }
    Ok(log_sum_exp(scores) - scores[positive])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Loss {
    pub total: f64,
    pub per_layer: Vec<f64>,
}

/// Record the stage-1 loss: at every layer, cross-entropy of the query
/// page's bookmark scores over all earlier pages against the positive page,
/// then the weighted mean over layers.
pub fn stage1_loss_tape(
    tape: &mut Tape,
    model: &Model,
    vars: &ParamVars,
    seq: &AugmentedSequence,
    positive_page: usize,
    config: &TrainConfig,
) -> Result<(Var, Vec<f64>)> {
    let n = seq.n_pages();
    if n < 2 {
        return Err(Error::InvalidInput("stage-1 samples need a query page and at least one candidate".into()));
    }
    let m = n - 1;
    if positive_page >= m {
        return Err(Error::Label(format!("positive page {positive_page} is not before query page {m}")));
    }
    let f = forward_tape(tape, model, vars, seq, &SelectionPlan::Retrieval(config.policy))?;
    let weights = config.layer_weights(model.config.n_layers);
    let candidates: Vec<usize> = (0..m).collect();
    let mut terms = Vec::with_capacity(weights.len());
    let mut per_layer = Vec::with_capacity(weights.len());
    for (l, &w) in weights.iter().enumerate() {
        let q = tape.gather_rows(f.q_bmk[l], &[m]);
        let k = tape.gather_rows(f.k_bmk[l], &candidates);
        let scores = tape.matmul_bt(q, k);
        let ce = tape.cross_entropy(scores, &[positive_page]);
        per_layer.push(tape.scalar(ce));
        terms.push((ce, w));
    }
    Ok((tape.weighted_sum(&terms), per_layer))
}

pub fn stage1_loss(model: &Model, seq: &AugmentedSequence, positive_page: usize, config: &TrainConfig) -> Result<Stage1Loss> {
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, &model.params, Some(&FreezeMask { trainable: Vec::new() }));
    let (loss, per_layer) = stage1_loss_tape(&mut tape, model, &vars, seq, positive_page, config)?;
    Ok(Stage1Loss { total: tape.scalar(loss), per_layer })
}

/// Record the mean next-token loss over normal targets at positions
/// `>= loss_from`, with attention restricted by `plan`.
pub fn stage2_loss_tape(
    tape: &mut Tape,
    model: &Model,
    vars: &ParamVars,
    seq: &AugmentedSequence,
    plan: &SelectionPlan,
    loss_from: usize,
) -> Result<Var> {
    let f = forward_tape(tape, model, vars, seq, plan)?;
    let normal = seq.normal_positions();
    let (rows, targets) = lm_targets(seq);
    let (rows, targets): (Vec<usize>, Vec<usize>) =
        rows.into_iter().zip(targets).filter(|(r, _)| normal[r + 1] >= loss_from).unzip();
    if rows.is_empty() {
        return Err(Error::InvalidInput("no language-model targets in range".into()));
    }
    let picked = tape.gather_rows(f.logits, &rows);
    Ok(tape.cross_entropy(picked, &targets))
}

/// Stage-2 loss with per-layer retrieval under `config.policy`.
pub fn stage2_loss(model: &Model, seq: &AugmentedSequence, config: &TrainConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, &model.params, Some(&FreezeMask { trainable: Vec::new() }));
    let loss = stage2_loss_tape(&mut tape, model, &vars, seq, &SelectionPlan::Retrieval(config.policy), 0)?;
    Ok(tape.scalar(loss))
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub stage: u8,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall_at_1: Option<f64>,
}

/// Optimizer state, freeze mask and metrics for one training stage.
pub struct Trainer {
    pub config: TrainConfig,
    pub mask: FreezeMask,
    pub optimizer: AdamW,
    pub step: usize,
    pub log: Vec<MetricRecord>,
}

impl Trainer {
    /// Stage 1 trains only the bookmark path; stage 2 trains everything.
    pub fn new(model: &Model, config: TrainConfig) -> Result<Self> {
        config.validate(model.config.n_layers)?;
        let mask = match config.stage {
            1 => FreezeMask::stage1(&model.params),
            _ => FreezeMask::all_trainable(&model.params),
        };
        let optimizer = AdamW::new(
            &model.params,
            AdamWHyper {
                learning_rate: config.learning_rate,
                beta1: config.beta1,
                beta2: config.beta2,
                eps: config.eps,
                weight_decay: config.weight_decay,
            },
        );
        Ok(Self { config, mask, optimizer, step: 0, log: Vec::new() })
    }

    /// Loss and gradient of one example under this stage's mask.
    pub fn example_gradients(&self, model: &Model, example: &Example) -> Result<(f64, Gradients)> {
        gradients(model, Some(&self.mask), |tape, vars| match (self.config.stage, example) {
            (1, Example::Pairwise { seq, positive_page }) => {
                Ok(stage1_loss_tape(tape, model, vars, seq, *positive_page, &self.config)?.0)
            }
            (2, Example::Text { seq, loss_from, plan }) => {
                let default = SelectionPlan::Retrieval(self.config.policy);
                stage2_loss_tape(tape, model, vars, seq, plan.as_ref().unwrap_or(&default), *loss_from)
            }
            _ => Err(Error::InvalidInput(format!("example kind does not fit stage {}", self.config.stage))),
        })
    }

    /// One optimizer update from exactly `grad_accum_steps × batch_size`
    /// examples; the gradient is their mean.
    pub fn step(&mut self, model: &mut Model, examples: &[Example]) -> Result<MetricRecord> {
        if examples.len() != self.config.examples_per_step() {
            return Err(Error::InvalidInput(format!(
                "an update takes {} examples, got {}",
                self.config.examples_per_step(),
                examples.len()
            )));
        }
        let mut total = Gradients::zeros_like(model);
        let mut loss = 0.0;
        for ex in examples {
            let (l, g) = self.example_gradients(model, ex)?;
            loss += l;
            total.add_assign(&g);
        }
        let n = examples.len() as f64;
        total.scale(1.0 / n);
        if !total.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient at step {}", self.step)));
        }
        self.optimizer.step(&mut model.params, &total, &self.mask);
        self.step += 1;
        let rec = MetricRecord {
            step: self.step,
            stage: self.config.stage,
            loss: loss / n,
            lr: self.config.learning_rate,
            recall_at_1: None,
        };
        self.log.push(rec.clone());
        Ok(rec)
    }

    pub fn write_metrics<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.log {
            serde_json::to_writer(&mut out, r)?;
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn save_metrics(&self, path: &Path) -> Result<()> {
        self.write_metrics(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// Trailing moving averages of `xs` over `window` entries.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || xs.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(xs.len() - window + 1);
    let mut sum: f64 = xs[..window].iter().sum();
    out.push(sum / window as f64);
    for i in window..xs.len() {
        sum += xs[i] - xs[i - window];
        out.push(sum / window as f64);
    }
    out
}
