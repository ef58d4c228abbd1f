use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{VocabProfile, DOC, FACT, QUERY};
use crate::error::{Error, Result};
use crate::paging::TokenId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeedleConfig {
    pub haystack_pages: usize,
    pub page_size: usize,
    /// Fraction of the haystack before the needle page.
    pub depth_fraction: f64,
    /// Answer tokens.
    pub value_len: usize,
    pub vocab_size: usize,
}

impl Default for NeedleConfig {
    fn default() -> Self {
        Self { haystack_pages: 64, page_size: 16, depth_fraction: 0.5, value_len: 2, vocab_size: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeedleSample {
    pub haystack: Vec<TokenId>,
    /// `[FACT, key, answer...]`.
    pub needle: Vec<TokenId>,
    pub needle_page: usize,
    /// Offset of the needle inside the haystack.
    pub needle_offset: usize,
    /// `[QUERY, key]`.
    pub question: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    pub depth_fraction: f64,
}

impl NeedleSample {
    pub fn key(&self) -> TokenId {
        self.needle[1]
    }
}

/// Filler haystack of `haystack_pages × page_size` tokens with one needle
/// inside page `min(⌊depth · pages⌋, pages - 1)`. Page 0 starts with `DOC`.
pub fn gen_needle(config: &NeedleConfig, seed: u64) -> Result<NeedleSample> {
    let w = config.page_size;
    if config.haystack_pages < 2 {
        return Err(Error::InvalidConfig("haystack_pages must be at least 2".into()));
    }
    if !(0.0..=1.0).contains(&config.depth_fraction) {
        return Err(Error::InvalidConfig("depth_fraction must lie in [0, 1]".into()));
    }
    let needle_len = 2 + config.value_len;
    if config.value_len == 0 || needle_len + 1 > w {
        return Err(Error::InvalidConfig(format!("a needle of {needle_len} tokens does not fit a page of {w}")));
    }
    let vocab = VocabProfile::new(config.vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pages = config.haystack_pages;
    let needle_page = ((config.depth_fraction * pages as f64).floor() as usize).min(pages - 1);
    let mut haystack = vocab.filler(&mut rng, pages * w);
    haystack[0] = DOC;
    let lo = if needle_page == 0 { 1 } else { 0 };
    let offset = needle_page * w + rng.random_range(lo..=w - needle_len);
    let key = vocab.key_token(&mut rng);
    let answer: Vec<TokenId> = (0..config.value_len).map(|_| vocab.value_token(&mut rng)).collect();
    let mut needle = vec![FACT, key];
    needle.extend(&answer);
    haystack[offset..offset + needle_len].copy_from_slice(&needle);
    Ok(NeedleSample {
        haystack,
        needle,
        needle_page,
        needle_offset: offset,
        question: vec![QUERY, key],
        answer,
        depth_fraction: config.depth_fraction,
    })
}

/// The nine depths `0.1, 0.2, ..., 0.9`.
pub fn standard_depths() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// One sample per depth, seeded from `seed` and the depth index.
pub fn needle_suite(base: &NeedleConfig, depths: &[f64], seed: u64) -> Result<Vec<NeedleSample>> {
    depths
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            gen_needle(&NeedleConfig { depth_fraction: d, ..base.clone() }, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))
        })
        .collect()
}
