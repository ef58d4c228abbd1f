use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::vocab::{VocabProfile, DOC, FACT, IS, QUERY, SENT_END};
use super::{max_overlap_page, PairwiseSample};
use crate::error::{Error, Result};
use crate::paging::TokenId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QaConfig {
    pub n_sentences: usize,
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
    pub page_size: usize,
    pub vocab_size: usize,
    /// Seeds the shared Markov chain, so every document speaks the same
    /// pseudo-language.
    pub chain_seed: u64,
    /// Successors per filler token.
    pub branching: usize,
    /// Ground-truth spans cover 1 to this many sentences.
    pub max_span_sentences: usize,
}

impl Default for QaConfig {
    fn default() -> Self {
        Self {
            n_sentences: 24,
            min_sentence_len: 5,
            max_sentence_len: 10,
            page_size: 16,
            vocab_size: 128,
            chain_seed: 0,
            branching: 4,
            max_span_sentences: 5,
        }
    }
}

/// First-order chain over filler tokens.
struct Chain {
    succ: Vec<Vec<TokenId>>,
    base: usize,
}

impl Chain {
    fn new(vocab: &VocabProfile, seed: u64, branching: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let succ = vocab
            .filler
            .clone()
            .map(|_| (0..branching.max(1)).map(|_| vocab.filler_token(&mut rng)).collect())
            .collect();
        Self { succ, base: vocab.filler.start }
    }

    fn sentence<R: Rng>(&self, vocab: &VocabProfile, rng: &mut R, len: usize) -> Vec<TokenId> {
        let mut s = vec![vocab.filler_token(rng)];
        while s.len() + 1 < len {
            let prev = *s.last().expect("non-empty") as usize - self.base;
            let next = &self.succ[prev];
            s.push(next[rng.random_range(0..next.len())]);
        }
        s.push(SENT_END);
        s
    }
}

/// A Markov-chain document with one planted fact `[FACT, key, IS, value]`;
/// the question is `[QUERY, key, IS]` and the labelled span covers the
/// fact sentence plus up to `max_span_sentences - 1` neighbours.
pub fn gen_synthetic_qa(config: &QaConfig, seed: u64) -> Result<PairwiseSample> {
    if config.n_sentences == 0
        || config.min_sentence_len < 2
        || config.max_sentence_len < config.min_sentence_len
        || config.max_span_sentences == 0
        || config.page_size < 3
    {
        return Err(Error::InvalidConfig("degenerate synthetic QA config".into()));
    }
    let vocab = VocabProfile::new(config.vocab_size)?;
    let chain = Chain::new(&vocab, config.chain_seed, config.branching);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let key = vocab.key_token(&mut rng);
    let value = vocab.value_token(&mut rng);
    let fact_at = rng.random_range(0..=config.n_sentences);
    let mut sentences: Vec<Vec<TokenId>> = (0..config.n_sentences)
        .map(|_| {
            let len = rng.random_range(config.min_sentence_len..=config.max_sentence_len);
            chain.sentence(&vocab, &mut rng, len)
        })
        .collect();
    sentences.insert(fact_at, vec![FACT, key, IS, value, SENT_END]);
    let total = sentences.len();
    let span_len = rng.random_range(1..=config.max_span_sentences.min(total));
    let lo = fact_at.saturating_sub(span_len - 1);
    let hi = fact_at.min(total - span_len);
    let first = rng.random_range(lo..=hi);

    let mut tokens = vec![DOC];
    let mut span = (0, 0);
    for (i, s) in sentences.iter().enumerate() {
        if i == first {
            span.0 = tokens.len();
        }
        tokens.extend(s);
        if i == first + span_len - 1 {
            span.1 = tokens.len();
        }
    }
    let positive_page = max_overlap_page(span, config.page_size, tokens.len())?;
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), json!("synthetic_qa"));
    meta.insert("seed".into(), json!(seed));
    meta.insert("page_size".into(), json!(config.page_size));
    meta.insert("positive_page".into(), json!(positive_page));
    meta.insert("negatives_count".into(), json!(tokens.len().div_ceil(config.page_size) - 1));
    meta.insert("answer".into(), json!([value]));
    meta.insert("span_sentences".into(), json!(span_len));
    Ok(PairwiseSample { tokens, positive_span: [span.0, span.1], query: vec![QUERY, key, IS], meta })
}
