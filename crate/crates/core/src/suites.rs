//! End-to-end checks shared by the command line and the test suite.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{full_attention_oracle, Engine, EngineConfig, EngineMode};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::paging::{AugmentedSequence, TokenId};

/// Uniform random normal tokens.
pub fn random_tokens(model: &Model, n: usize, seed: u64) -> Vec<TokenId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = model.config.bookmark_token();
    (0..n).map(|_| rng.random_range(0..top)).collect()
}

pub const EQUIVALENCE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub tokens: usize,
    pub pages: usize,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub seconds: f64,
}

/// Prefill with every page selectable and compare the logits against the
/// dense oracle.
pub fn equivalence_check(model: &Model, n_tokens: usize, seed: u64) -> Result<EquivalenceReport> {
    let t = Instant::now();
    let toks = random_tokens(model, n_tokens, seed);
    let seq = AugmentedSequence::from_segments(&[&toks], model.config.page_size, model.config.bookmark_token())?;
    let m = seq.n_pages();
    let cfg = EngineConfig { k_pages: m.max(2), sink_count: 1, local_count: 1, ..Default::default() };
    let mut engine = Engine::new(model, cfg)?;
    let logits = engine.prefill(&seq)?;
    let oracle = full_attention_oracle(model, &seq)?;
    let max_abs_diff = logits.max_abs_diff(&oracle);
    Ok(EquivalenceReport {
        tokens: n_tokens,
        pages: m,
        max_abs_diff,
        tolerance: EQUIVALENCE_TOLERANCE,
        pass: max_abs_diff < EQUIVALENCE_TOLERANCE,
        seconds: t.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub lengths: Vec<usize>,
    pub hot_budget_tokens: usize,
    /// Peak hot-tier entries of the retrieval engine per length.
    pub retrieval_peak_hot: Vec<usize>,
    /// Peak resident entries of full attention per length.
    pub full_peak_resident: Vec<usize>,
    /// Retrieval peaks are all equal.
    pub flat: bool,
    /// Full-attention peaks strictly increase.
    pub growing: bool,
    pub pass: bool,
}

/// Prefill and decode a few tokens at each length under retrieval with a
/// fixed hot budget and under full attention.
pub fn memory_check(model: &Model, engine: &EngineConfig, lengths: &[usize], seed: u64) -> Result<MemoryReport> {
    if lengths.is_empty() {
        return Err(Error::InvalidInput("no sequence lengths".into()));
    }
    let budget = engine
        .resolved_hot_budget(model.config.page_size)
        .ok_or_else(|| Error::InvalidConfig("memory check needs a bounded mode".into()))?;
    let sparse = EngineConfig { mode: EngineMode::Retrieval, hot_budget_tokens: Some(budget), max_new_tokens: 4, ..engine.clone() };
    let full = EngineConfig { mode: EngineMode::FullAttention, hot_budget_tokens: None, max_new_tokens: 4, ..engine.clone() };
    let query = random_tokens(model, 2, seed ^ 0x5eed);
    let mut retrieval_peak_hot = Vec::new();
    let mut full_peak_resident = Vec::new();
    for (i, &n) in lengths.iter().enumerate() {
        let toks = random_tokens(model, n, seed.wrapping_add(i as u64));
        for (cfg, out) in [(&sparse, &mut retrieval_peak_hot), (&full, &mut full_peak_resident)] {
            let seq = AugmentedSequence::from_segments(&[&toks], model.config.page_size, model.config.bookmark_token())?;
            let mut e = Engine::new(model, cfg.clone())?;
            e.prefill(&seq)?;
            e.decode(&query)?;
            out.push(e.trace().peak_hot_tokens());
        }
    }
    let flat = retrieval_peak_hot.windows(2).all(|w| w[0] == w[1]);
    let growing = full_peak_resident.windows(2).all(|w| w[0] < w[1]);
    Ok(MemoryReport {
        lengths: lengths.to_vec(),
        hot_budget_tokens: budget,
        retrieval_peak_hot,
        full_peak_resident,
        flat,
        growing,
        pass: flat && growing,
    })
}
