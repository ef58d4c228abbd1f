use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::vocab::{VocabProfile, DOC, QUERY};
use super::{max_overlap_page, PairwiseSample};
use crate::error::{Error, Result};
use crate::paging::TokenId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairwiseConfig {
    pub n_negatives: usize,
    /// Context plus query.
    pub max_tokens: usize,
    pub page_size: usize,
    /// Desired passage length; shrunk to fit `max_tokens`.
    pub passage_len: usize,
    /// Key tokens shared by the query and the positive passage.
    pub phrase_len: usize,
    /// Lead with one passage-length preamble that acts as the sink page.
    pub preamble: bool,
    pub vocab_size: usize,
}

impl Default for PairwiseConfig {
    fn default() -> Self {
        Self {
            n_negatives: 7,
            max_tokens: 1024,
            page_size: 16,
            passage_len: 16,
            phrase_len: 2,
            preamble: true,
            vocab_size: 128,
        }
    }
}

impl PairwiseConfig {
    pub fn query_len(&self) -> usize {
        1 + self.phrase_len
    }

    /// Passage length after fitting everything into `max_tokens`.
    pub fn effective_passage_len(&self) -> Result<usize> {
        if self.n_negatives == 0 {
            return Err(Error::InvalidConfig("n_negatives must be at least 1".into()));
        }
        if self.phrase_len == 0 || self.page_size == 0 {
            return Err(Error::InvalidConfig("phrase_len and page_size must be positive".into()));
        }
        if self.query_len() > self.page_size {
            return Err(Error::InvalidConfig("the query must fit on one page".into()));
        }
        let units = self.n_negatives + 1 + usize::from(self.preamble);
        let room = self.max_tokens.saturating_sub(self.query_len()) / units;
        let len = self.passage_len.min(room);
        if len < self.phrase_len + 1 {
            return Err(Error::InvalidConfig(format!(
                "max_tokens {} leaves {room} tokens per passage, need at least {}",
                self.max_tokens,
                self.phrase_len + 1
            )));
        }
        Ok(len)
    }
}

/// Draw `n` distinct phrases of `len` key tokens. Phrases are disjoint
/// while the key range allows it, otherwise merely distinct.
fn phrases<R: Rng>(vocab: &VocabProfile, rng: &mut R, n: usize, len: usize) -> Vec<Vec<TokenId>> {
    let mut pool: Vec<TokenId> = vocab.keys.clone().map(|t| t as TokenId).collect();
    if pool.len() >= n * len {
        pool.shuffle(rng);
        return pool.chunks(len).take(n).map(<[TokenId]>::to_vec).collect();
    }
    let mut out: Vec<Vec<TokenId>> = Vec::with_capacity(n);
    while out.len() < n {
        let p: Vec<TokenId> = (0..len).map(|_| vocab.key_token(rng)).collect();
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

/// One positive passage and `n_negatives` distractors, each carrying its own
/// key phrase at a random offset, shuffled; the query `[QUERY, phrase]` of
/// the positive is appended on its own page.
pub fn gen_pairwise(config: &PairwiseConfig, seed: u64) -> Result<PairwiseSample> {
    let len = config.effective_passage_len()?;
    let vocab = VocabProfile::new(config.vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.n_negatives + 1;
    let phr = phrases(&vocab, &mut rng, n, config.phrase_len);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut tokens = Vec::new();
    if config.preamble {
        tokens.push(DOC);
        tokens.extend(vocab.filler(&mut rng, len - 1));
    }
    let mut span = (0, 0);
    for &p in &order {
        let start = tokens.len();
        let mut passage = vocab.filler(&mut rng, len);
        let at = rng.random_range(0..=len - config.phrase_len);
        passage[at..at + config.phrase_len].copy_from_slice(&phr[p]);
        tokens.extend(passage);
        if p == 0 {
            span = (start, start + len);
        }
    }
    let mut query = vec![QUERY];
    query.extend(&phr[0]);
    let positive_page = max_overlap_page(span, config.page_size, tokens.len())?;
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), json!("pairwise"));
    meta.insert("seed".into(), json!(seed));
    meta.insert("page_size".into(), json!(config.page_size));
    meta.insert("positive_page".into(), json!(positive_page));
    meta.insert("negatives_count".into(), json!(config.n_negatives));
    meta.insert("passage_len".into(), json!(len));
    Ok(PairwiseSample { tokens, positive_span: [span.0, span.1], query, meta })
}
