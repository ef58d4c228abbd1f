//! End-to-end training runs at toy scale, shared by the CLI, the examples
//! and the acceptance suite.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{
    eval_needle, eval_recall, gen_needle, gen_pairwise, needle_suite, needle_training_sequence, standard_depths,
    gen_synthetic_qa, ModelScorer, NeedleConfig, NeedleSample, PairwiseConfig, QaConfig, RandomScorer, RecallReport,
};
use crate::engine::{EngineConfig, EngineMode};
use crate::error::{Error, Result};
use crate::model::{forward, lm_loss, Model, ModelConfig, SelectionPlan};
use crate::paging::{AugmentedSequence, TokenId};
use crate::retriever::{select_pages, SelectionPolicy};
use crate::training::{
    moving_average, stage2_loss, Example, TrainConfig, Trainer, STAGE1_LEARNING_RATE, STAGE2_LEARNING_RATE,
};

/// Seeds of the training split; the held-out split uses the upper half of
/// the same 32-bit window so the two never collide.
pub fn split_seed(seed: u64, heldout: bool, i: usize) -> u64 {
    (seed << 32) | (u64::from(heldout) << 31) | i as u64
}

/// `base` with the fields of a JSON object merged over it recursively.
pub fn with_overrides<T: Serialize + DeserializeOwned>(base: &T, json: &str) -> Result<T> {
    fn merge(base: &mut Value, over: Value) {
        match (base, over) {
            (Value::Object(b), Value::Object(o)) => {
                for (k, v) in o {
                    merge(b.entry(k).or_insert(Value::Null), v);
                }
            }
            (b, o) => *b = o,
        }
    }
    let mut v = serde_json::to_value(base)?;
    merge(&mut v, serde_json::from_str(json)?);
    serde_json::from_value(v).map_err(|e| Error::InvalidConfig(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Recipe {
    pub model: ModelConfig,
    pub data: PairwiseConfig,
    pub train_samples: usize,
    pub heldout_samples: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    /// Multiplier on the published stage-1 learning rate.
    pub lr_scale: f64,
    /// Attention pattern while encoding the candidate pages.
    pub encode_policy: SelectionPolicy,
    pub seed: u64,
}

impl Default for Stage1Recipe {
    fn default() -> Self {
        Self {
            model: ModelConfig { d_model: 32, n_heads: 4, n_layers: 3, d_ff: 64, page_size: 16, ..Default::default() },
            data: PairwiseConfig { phrase_len: 3, ..Default::default() },
            train_samples: 2000,
            heldout_samples: 500,
            steps: 2000,
            batch_size: 1,
            grad_accum_steps: 4,
            lr_scale: 400.0,
            // every page sees the sink and itself only
            encode_policy: SelectionPolicy { k_pages: 1, sink_count: 1, local_count: 0 },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Outcome {
    pub before: RecallReport,
    pub after: RecallReport,
    pub chance: RecallReport,
    pub losses: Vec<f64>,
    pub seconds: f64,
}

impl Stage1Recipe {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: STAGE1_LEARNING_RATE * self.lr_scale,
            grad_accum_steps: self.grad_accum_steps,
            batch_size: self.batch_size,
            max_steps: self.steps,
            seed: self.seed,
            policy: self.encode_policy,
            ..TrainConfig::stage1()
        }
    }

    fn split(&self, heldout: bool) -> Result<Vec<(AugmentedSequence, usize)>> {
        let n = if heldout { self.heldout_samples } else { self.train_samples };
        let data = PairwiseConfig { page_size: self.model.page_size, vocab_size: self.model.vocab_size, ..self.data.clone() };
        (0..n)
            .map(|i| {
                let s = gen_pairwise(&data, split_seed(self.seed, heldout, i))?;
                let w = self.model.page_size;
                Ok((s.sequence(w, self.model.bookmark_token())?, s.positive_page(w)?))
            })
            .collect()
    }

    /// Recall@1 of the model's bookmark scores on held-out cases.
    pub fn recall(&self, model: &Model, cases: &[(AugmentedSequence, usize)]) -> Result<RecallReport> {
        let sink = self.encode_policy.sink_count;
        eval_recall(&mut ModelScorer::new(model, SelectionPlan::Retrieval(self.encode_policy)), cases, 1, sink)
    }

    /// Initialize, measure, train the bookmark path, measure again.
    pub fn run(&self) -> Result<(Model, Stage1Outcome)> {
        let t = Instant::now();
        let mut model = Model::init(ModelConfig { seed: self.seed, ..self.model.clone() })?;
        let train = self.split(false)?;
        let heldout = self.split(true)?;
        let before = self.recall(&model, &heldout)?;
        let chance = eval_recall(
            &mut RandomScorer::new(model.config.n_layers, self.seed),
            &heldout,
            1,
            self.encode_policy.sink_count,
        )?;
        let mut trainer = Trainer::new(&model, self.train_config())?;
        let per = trainer.config.examples_per_step();
        let mut losses = Vec::with_capacity(self.steps);
        for step in 0..self.steps {
            let batch: Vec<Example> = (0..per)
                .map(|j| {
                    let (seq, positive_page) = train[(step * per + j) % train.len()].clone();
                    Example::Pairwise { seq, positive_page }
                })
                .collect();
            losses.push(trainer.step(&mut model, &batch)?.loss);
        }
        let after = self.recall(&model, &heldout)?;
        Ok((model, Stage1Outcome { before, after, chance, losses, seconds: t.elapsed().as_secs_f64() }))
    }
}

/// Copy-task pipeline: pretrain a tiny model to answer needle questions with
/// the needle page in view, train its retriever, post-train under the
/// decoding layout, then compare retrieval against a sliding window of the
/// same page budget.
/// Sparse language-model adaptation on a fixed synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Recipe {
    pub model: ModelConfig,
    pub corpus: QaConfig,
    /// Documents in the corpus; every update averages over all of them.
    pub documents: usize,
    pub steps: usize,
    /// Multiplier on the published stage-2 learning rate.
    pub lr_scale: f64,
    pub policy: SelectionPolicy,
    pub window: usize,
    pub seed: u64,
}

impl Default for Stage2Recipe {
    fn default() -> Self {
        Self {
            model: ModelConfig { d_model: 16, n_heads: 2, n_layers: 2, d_ff: 32, page_size: 16, ..Default::default() },
            corpus: QaConfig { n_sentences: 8, ..Default::default() },
            documents: 8,
            steps: 300,
            lr_scale: 2000.0,
            policy: SelectionPolicy { k_pages: 2, sink_count: 1, local_count: 1 },
            window: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Outcome {
    /// Largest relative gap between the sparse loss at `k = m` and the dense
    /// loss over the corpus, before training.
    pub saturated_rel_err: f64,
    pub losses: Vec<f64>,
    pub moving_average: Vec<f64>,
    pub strictly_decreasing: bool,
    pub seconds: f64,
}

impl Stage2Recipe {
    pub fn corpus(&self) -> Result<Vec<AugmentedSequence>> {
        let cfg = QaConfig { page_size: self.model.page_size, vocab_size: self.model.vocab_size, ..self.corpus.clone() };
        (0..self.documents)
            .map(|i| {
                let d = gen_synthetic_qa(&cfg, split_seed(self.seed, false, i))?;
                AugmentedSequence::from_segments(&[&d.tokens, &d.query], self.model.page_size, self.model.bookmark_token())
            })
            .collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: STAGE2_LEARNING_RATE * self.lr_scale,
            grad_accum_steps: self.documents,
            batch_size: 1,
            max_steps: self.steps,
            seed: self.seed,
            policy: self.policy,
            ..TrainConfig::stage2()
        }
    }

    pub fn run(&self) -> Result<(Model, Stage2Outcome)> {
        let t = Instant::now();
        let mut model = Model::init(ModelConfig { seed: self.seed, ..self.model.clone() })?;
        let corpus = self.corpus()?;
        let mut saturated_rel_err: f64 = 0.0;
        for seq in &corpus {
            let all = TrainConfig { policy: SelectionPolicy { k_pages: seq.n_pages(), ..self.policy }, ..self.train_config() };
            let sparse = stage2_loss(&model, seq, &all)?;
            let dense = lm_loss(&forward(&model, seq, &SelectionPlan::Full)?, seq)?;
            saturated_rel_err = saturated_rel_err.max((sparse - dense).abs() / dense.abs());
        }
        let mut trainer = Trainer::new(&model, self.train_config())?;
        let batch: Vec<Example> = corpus.into_iter().map(Example::text).collect();
        let mut losses = Vec::with_capacity(self.steps);
        for _ in 0..self.steps {
            losses.push(trainer.step(&mut model, &batch)?.loss);
        }
        let moving_average = moving_average(&losses, self.window);
        let strictly_decreasing = !moving_average.is_empty() && moving_average.windows(2).all(|w| w[1] < w[0]);
        let seconds = t.elapsed().as_secs_f64();
        Ok((model, Stage2Outcome { saturated_rel_err, losses, moving_average, strictly_decreasing, seconds }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeedleRecipe {
    pub model: ModelConfig,
    /// Evaluation suites.
    pub eval: NeedleConfig,
    pub eval_suites: usize,
    /// Retrieval policy at evaluation and while training.
    pub policy: SelectionPolicy,
    /// Training haystacks have 2 pages for the first `warm_steps` updates of
    /// pretraining, then grow by `ramp_pages_per_step` up to
    /// `train_max_pages`; a sample's length is uniform up to the current cap.
    pub train_max_pages: usize,
    pub warm_steps: usize,
    pub ramp_pages_per_step: f64,
    pub train_value_len: usize,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub stage1_steps: usize,
    /// Multiplier on the published stage-1 learning rate.
    pub stage1_lr_scale: f64,
    pub stage2_steps: usize,
    /// Multiplier on the published stage-2 learning rate.
    pub stage2_lr_scale: f64,
    pub grad_accum_steps: usize,
    pub seed: u64,
}

impl Default for NeedleRecipe {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                d_model: 32,
                n_heads: 2,
                n_layers: 2,
                d_ff: 64,
                page_size: 16,
                rope_base: 1e5,
                ..Default::default()
            },
            eval: NeedleConfig::default(),
            eval_suites: 5,
            policy: SelectionPolicy { k_pages: 3, sink_count: 1, local_count: 1 },
            train_max_pages: 64,
            warm_steps: 4500,
            ramp_pages_per_step: 0.05,
            train_value_len: 2,
            pretrain_steps: 6500,
            pretrain_lr: 3e-3,
            stage1_steps: 100,
            stage1_lr_scale: 400.0,
            stage2_steps: 50,
            stage2_lr_scale: 300.0,
            grad_accum_steps: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeedleOutcome {
    /// Exact-match rate keyed by depth, then by `retrieval` / `sliding_window`.
    pub accuracy: BTreeMap<String, BTreeMap<String, f64>>,
    /// Mean accuracy over depths whose needle lies outside the window.
    pub retrieval_beyond_window: f64,
    pub sliding_beyond_window: f64,
    /// Needle-page recall of the query bookmark per layer after stage 1.
    pub needle_recall: Vec<f64>,
    pub pretrain_losses: Vec<f64>,
    pub stage1_losses: Vec<f64>,
    pub stage2_losses: Vec<f64>,
    pub seconds: f64,
}

/// Training layout of a needle sample: haystack pages, the question page,
/// then the answer. Returns the sequence, the question page index and the
/// position of the first answer token.
pub fn needle_layout(sample: &NeedleSample, page_size: usize, bookmark: TokenId) -> Result<(AugmentedSequence, usize, usize)> {
    let (seq, answer_start) = needle_training_sequence(sample, page_size, bookmark)?;
    let question_page = seq.page_of[answer_start] - 1;
    Ok((seq, question_page, answer_start))
}

/// Selections with the needle page in view of the question page at every
/// layer except the first. Other pages get what content-blind retrieval
/// would pick: sinks, local pages, then the lowest indices.
pub fn oracle_plan(n_layers: usize, n_pages: usize, question_page: usize, needle_page: usize, policy: &SelectionPolicy) -> Result<SelectionPlan> {
    let blind = |page: usize| -> Result<Vec<usize>> {
        if page == 0 {
            return Ok(Vec::new());
        }
        Ok(select_pages(&vec![0.0; page], policy, 0, page)?.selected)
    };
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let mut pages = Vec::with_capacity(n_pages);
        for p in 0..n_pages {
            if p == question_page && l > 0 {
                let scores: Vec<f64> = (0..p).map(|j| if j == needle_page { 1.0 } else { 0.0 }).collect();
                pages.push(select_pages(&scores, policy, l, p)?.selected);
            } else if p <= question_page {
                pages.push(blind(p)?);
            } else {
                pages.push(Vec::new());
            }
        }
        layers.push(pages);
    }
    Ok(SelectionPlan::Decode { base: Box::new(SelectionPlan::Fixed(layers)), query_page: question_page })
}

impl NeedleRecipe {
    /// Haystack cap at a pretraining step.
    pub fn max_pages_at(&self, step: usize) -> usize {
        let grown = 2.0 + step.saturating_sub(self.warm_steps) as f64 * self.ramp_pages_per_step;
        (grown as usize).clamp(2, self.train_max_pages.max(2))
    }

    fn train_sample(&self, i: usize, max_pages: usize) -> Result<NeedleSample> {
        use rand::{Rng, SeedableRng};
        let seed = split_seed(self.seed, false, i);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let cfg = NeedleConfig {
            haystack_pages: rng.random_range(2..=max_pages),
            depth_fraction: rng.random_range(0.0..1.0),
            value_len: self.train_value_len,
            page_size: self.model.page_size,
            vocab_size: self.model.vocab_size,
        };
        gen_needle(&cfg, seed)
    }

    /// Engine configurations compared at equal page budget.
    pub fn engine_configs(&self) -> Vec<(String, EngineConfig)> {
        let p = self.policy;
        let retrieval = EngineConfig {
            k_pages: p.k_pages,
            sink_count: p.sink_count,
            local_count: p.local_count,
            mode: EngineMode::Retrieval,
            ..Default::default()
        };
        let sliding = retrieval.sliding_window_equivalent();
        vec![("retrieval".to_string(), retrieval), ("sliding_window".to_string(), sliding)]
    }

    /// Whether a needle page is outside the sliding window when the question
    /// page is `query_page`.
    pub fn beyond_window(&self, needle_page: usize, query_page: usize) -> bool {
        let window = self.policy.page_budget() - self.policy.sink_count;
        needle_page >= self.policy.sink_count && needle_page + window < query_page
    }

    fn batches<F: FnMut(usize) -> Result<Example>>(&self, steps: usize, offset: usize, mut make: F) -> Result<Vec<Vec<Example>>> {
        let per = self.grad_accum_steps;
        (0..steps).map(|s| (0..per).map(|j| make(offset + s * per + j)).collect()).collect()
    }

    fn train_phase(
        &self,
        model: &mut Model,
        config: TrainConfig,
        steps: usize,
        offset: usize,
        make: impl FnMut(usize) -> Result<Example>,
    ) -> Result<Vec<f64>> {
        let mut trainer = Trainer::new(model, config)?;
        let mut losses = Vec::with_capacity(steps);
        for batch in self.batches(steps, offset, make)? {
            losses.push(trainer.step(model, &batch)?.loss);
        }
        Ok(losses)
    }

    pub fn run(&self) -> Result<(Model, NeedleOutcome)> {
        let t = Instant::now();
        let mut model = Model::init(ModelConfig { seed: self.seed, ..self.model.clone() })?;
        let (w, bmk, n_layers) = (self.model.page_size, self.model.bookmark_token(), self.model.n_layers);
        let per = self.grad_accum_steps;
        let base = TrainConfig { grad_accum_steps: per, batch_size: 1, seed: self.seed, policy: self.policy, ..TrainConfig::stage2() };

        let pretrain = TrainConfig { learning_rate: self.pretrain_lr, max_steps: self.pretrain_steps, ..base.clone() };
        let pretrain_losses = self.train_phase(&mut model, pretrain, self.pretrain_steps, 0, |i| {
            let s = self.train_sample(i, self.max_pages_at(i / per))?;
            let (seq, q, start) = needle_layout(&s, w, bmk)?;
            let plan = oracle_plan(n_layers, seq.n_pages(), q, s.needle_page, &self.policy)?;
            Ok(Example::Text { seq, loss_from: start, plan: Some(plan) })
        })?;

        let offset = self.pretrain_steps * per;
        let stage1 = TrainConfig {
            stage: 1,
            learning_rate: STAGE1_LEARNING_RATE * self.stage1_lr_scale,
            max_steps: self.stage1_steps,
            ..base.clone()
        };
        let stage1_losses = self.train_phase(&mut model, stage1, self.stage1_steps, offset, |i| {
            let s = self.train_sample(i, self.train_max_pages)?;
            let seq = AugmentedSequence::from_segments(&[&s.haystack, &s.question], w, bmk)?;
            Ok(Example::Pairwise { seq, positive_page: s.needle_page })
        })?;

        let offset = offset + self.stage1_steps * per;
        let stage2 = TrainConfig {
            learning_rate: STAGE2_LEARNING_RATE * self.stage2_lr_scale,
            max_steps: self.stage2_steps,
            ..base
        };
        let stage2_losses = self.train_phase(&mut model, stage2, self.stage2_steps, offset, |i| {
            let s = self.train_sample(i, self.train_max_pages)?;
            let (seq, q, start) = needle_layout(&s, w, bmk)?;
            let plan = SelectionPlan::Decode { base: Box::new(SelectionPlan::Retrieval(self.policy)), query_page: q };
            Ok(Example::Text { seq, loss_from: start, plan: Some(plan) })
        })?;

        let suites = (0..self.eval_suites)
            .map(|i| needle_suite(&self.eval, &standard_depths(), split_seed(self.seed, true, i)))
            .collect::<Result<Vec<_>>>()?;
        let samples: Vec<NeedleSample> = suites.into_iter().flatten().collect();
        let cases = samples
            .iter()
            .map(|s| Ok((AugmentedSequence::from_segments(&[&s.haystack, &s.question], w, bmk)?, s.needle_page)))
            .collect::<Result<Vec<_>>>()?;
        let needle_recall = eval_recall(
            &mut ModelScorer::new(&model, SelectionPlan::Retrieval(self.policy)),
            &cases,
            self.policy.k_pages - self.policy.sink_count,
            self.policy.sink_count,
        )?
        .per_layer;
        let report = eval_needle(&model, &samples, &self.engine_configs())?;
        let query_page = self.eval.haystack_pages;
        let beyond = |name: &str| {
            let rs: Vec<bool> = report
                .results
                .iter()
                .zip(samples.iter().flat_map(|s| std::iter::repeat_n(s, 2)))
                .filter(|(r, s)| r.config == name && self.beyond_window(s.needle_page, query_page))
                .map(|(r, _)| r.exact)
                .collect();
            rs.iter().filter(|&&e| e).count() as f64 / rs.len().max(1) as f64
        };
        let outcome = NeedleOutcome {
            retrieval_beyond_window: beyond("retrieval"),
            sliding_beyond_window: beyond("sliding_window"),
            accuracy: report.accuracy,
            needle_recall,
            pretrain_losses,
            stage1_losses,
            stage2_losses,
            seconds: t.elapsed().as_secs_f64(),
        };
        Ok((model, outcome))
    }
}
