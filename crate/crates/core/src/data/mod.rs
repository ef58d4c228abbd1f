//! Synthetic corpora in the shape of pairwise retrieval data, JSONL
//! ingestion, and retrieval / needle metrics.

mod eval;
mod needle;
mod pairwise;
mod qa;
mod vocab;

pub use eval::{
    eval_needle, eval_recall, EvalReport, ModelScorer, NeedleReport, NeedleResult, OracleScorer, PageScorer,
    RandomScorer, RecallReport,
};
pub use needle::{gen_needle, needle_suite, standard_depths, NeedleConfig, NeedleSample};
pub use pairwise::{gen_pairwise, PairwiseConfig};
pub use qa::{gen_synthetic_qa, QaConfig};
pub use vocab::{VocabProfile, DOC, FACT, IS, QUERY, SENT_END};

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paging::{AugmentedSequence, TokenId};
use crate::training::Example;

/// A context with one labelled positive span and a trailing query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseSample {
    pub tokens: Vec<TokenId>,
    /// Half-open `[start, end)` into `tokens`.
    pub positive_span: [usize; 2],
    pub query: Vec<TokenId>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

/// The page with the largest overlap with `[span.0, span.1)`; ties go to the
/// earlier page.
pub fn max_overlap_page(span: (usize, usize), page_size: usize, len: usize) -> Result<usize> {
    let (s, e) = span;
    if s >= e || e > len {
        return Err(Error::Label(format!("span [{s}, {e}) is empty or outside {len} tokens")));
    }
    if page_size == 0 {
        return Err(Error::InvalidConfig("page size must be at least 1".into()));
    }
    let mut best = (0, s / page_size);
    for p in s / page_size..=(e - 1) / page_size {
        let overlap = e.min((p + 1) * page_size) - s.max(p * page_size);
        if overlap > best.0 {
            best = (overlap, p);
        }
    }
    Ok(best.1)
}

impl PairwiseSample {
    /// Label for a given page size.
    pub fn positive_page(&self, page_size: usize) -> Result<usize> {
        max_overlap_page((self.positive_span[0], self.positive_span[1]), page_size, self.tokens.len())
    }

    pub fn negatives_count(&self) -> Option<usize> {
        self.meta.get("negatives_count").and_then(|v| v.as_u64()).map(|v| v as usize)
    }

    /// Context pages followed by the query on fresh page(s).
    pub fn sequence(&self, page_size: usize, bookmark: TokenId) -> Result<AugmentedSequence> {
        if self.query.is_empty() {
            return Err(Error::InvalidInput("sample has no query".into()));
        }
        AugmentedSequence::from_segments(&[&self.tokens, &self.query], page_size, bookmark)
    }

    /// Stage-1 training record. The query must fit on one page.
    pub fn to_example(&self, page_size: usize, bookmark: TokenId) -> Result<Example> {
        if self.query.len() > page_size {
            return Err(Error::InvalidInput("query spans more than one page".into()));
        }
        Ok(Example::Pairwise { seq: self.sequence(page_size, bookmark)?, positive_page: self.positive_page(page_size)? })
    }
}

pub fn write_jsonl<W: Write>(mut out: W, samples: &[PairwiseSample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        writeln!(out)?;
    }
    Ok(())
}

pub fn to_jsonl(samples: &[PairwiseSample]) -> String {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, samples).expect("writing to memory");
    String::from_utf8(buf).expect("utf-8 json")
}

/// Parse one record per non-blank line.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<PairwiseSample>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: PairwiseSample = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidInput(format!("line {}: {e}", i + 1)))?;
        if s.positive_span[0] >= s.positive_span[1] || s.positive_span[1] > s.tokens.len() {
            return Err(Error::Label(format!("line {}: positive_span out of bounds", i + 1)));
        }
        out.push(s);
    }
    Ok(out)
}

pub fn parse_jsonl(text: &str) -> Result<Vec<PairwiseSample>> {
    read_jsonl(text.as_bytes())
}

/// Copy-task training sequence: haystack pages, the question on its own page,
/// then the answer on a fresh page, as decoding lays them out. Returns the
/// sequence and the augmented position where the answer starts.
pub fn needle_training_sequence(sample: &NeedleSample, page_size: usize, bookmark: TokenId) -> Result<(AugmentedSequence, usize)> {
    let seq = AugmentedSequence::from_segments(&[&sample.haystack, &sample.question, &sample.answer], page_size, bookmark)?;
    let answer_page = seq.n_pages() - sample.answer.len().div_ceil(page_size);
    let start = seq.page_spans[answer_page].start;
    Ok((seq, start))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn overlap_label_examples() {
        // one sentence inside page 3
        assert_eq!(max_overlap_page((50, 55), 16, 200).unwrap(), 3);
        // 10 tokens, 4 in page 3 and 6 in page 4
        assert_eq!(max_overlap_page((60, 70), 16, 200).unwrap(), 4);
        // even split goes to the earlier page
        assert_eq!(max_overlap_page((60, 68), 16, 200).unwrap(), 3);
        assert!(matches!(max_overlap_page((5, 5), 16, 200), Err(Error::Label(_))));
        assert!(matches!(max_overlap_page((5, 300), 16, 200), Err(Error::Label(_))));
    }

    #[test]
    fn pairwise_shapes() {
        let cfg = PairwiseConfig { n_negatives: 40, max_tokens: 1024, page_size: 128, passage_len: 128, preamble: false, ..Default::default() };
        let s = gen_pairwise(&cfg, 3).unwrap();
        let len = cfg.effective_passage_len().unwrap();
        assert_eq!(s.tokens.len(), 41 * len);
        assert!(s.tokens.len() + s.query.len() <= 1024);
        assert_eq!(s.negatives_count(), Some(40));
        assert_eq!(s.meta["positive_page"], serde_json::json!(s.positive_page(128).unwrap()));

        let two = gen_pairwise(&PairwiseConfig { n_negatives: 1, preamble: false, ..Default::default() }, 9).unwrap();
        assert!(two.positive_page(16).unwrap() <= 1);
        assert_eq!(two.tokens.len(), 32);

        let tight = PairwiseConfig { max_tokens: 20, ..Default::default() };
        assert!(matches!(gen_pairwise(&tight, 0), Err(Error::InvalidConfig(_))));
        assert!(matches!(gen_pairwise(&PairwiseConfig { n_negatives: 0, ..Default::default() }, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn positive_passage_carries_the_query_phrase() {
        for seed in 0..50 {
            let s = gen_pairwise(&PairwiseConfig::default(), seed).unwrap();
            let phrase = &s.query[1..];
            let [a, b] = s.positive_span;
            assert!(s.tokens[a..b].windows(phrase.len()).any(|w| w == phrase));
            let hits = s.tokens.windows(phrase.len()).filter(|w| *w == phrase).count();
            assert_eq!(hits, 1);
            // with the preamble on page 0 the eight passages sit on pages 1..=8
            let p = s.positive_page(16).unwrap();
            assert!((1..=8).contains(&p));
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let a = to_jsonl(&(0..5).map(|s| gen_pairwise(&PairwiseConfig::default(), s).unwrap()).collect::<Vec<_>>());
        let b = to_jsonl(&(0..5).map(|s| gen_pairwise(&PairwiseConfig::default(), s).unwrap()).collect::<Vec<_>>());
        assert_eq!(a, b);
        assert_eq!(gen_synthetic_qa(&QaConfig::default(), 4).unwrap(), gen_synthetic_qa(&QaConfig::default(), 4).unwrap());
        assert_eq!(gen_needle(&NeedleConfig::default(), 4).unwrap(), gen_needle(&NeedleConfig::default(), 4).unwrap());
    }

    #[test]
    fn qa_span_covers_the_fact() {
        for seed in 0..100 {
            let s = gen_synthetic_qa(&QaConfig::default(), seed).unwrap();
            let [a, b] = s.positive_span;
            let key = s.query[1];
            let fact = s.tokens.windows(2).position(|w| w == [FACT, key]).unwrap();
            assert!(a <= fact && fact + 5 <= b);
            let n = s.meta["span_sentences"].as_u64().unwrap();
            assert!((1..=5).contains(&n));
            assert_eq!(s.tokens[a..b].iter().filter(|&&t| t == SENT_END).count() as u64, n);
        }
    }

    #[test]
    fn qa_corpus_is_fast() {
        let t = std::time::Instant::now();
        let corpus: Vec<_> = (0..5000).map(|s| gen_synthetic_qa(&QaConfig::default(), s).unwrap()).collect();
        assert_eq!(corpus.len(), 5000);
        assert!(t.elapsed().as_secs() < 60);
    }

    #[test]
    fn needle_placement() {
        let s = gen_needle(&NeedleConfig { depth_fraction: 0.0, ..Default::default() }, 1).unwrap();
        assert_eq!(s.needle_page, 0);
        assert_eq!(s.needle_offset / 16, 0);
        let s = gen_needle(&NeedleConfig { depth_fraction: 1.0, ..Default::default() }, 1).unwrap();
        assert_eq!(s.needle_page, 63);
        let suite = needle_suite(&NeedleConfig::default(), &standard_depths(), 7).unwrap();
        assert_eq!(suite.len(), 9);
        assert_eq!(suite, needle_suite(&NeedleConfig::default(), &standard_depths(), 7).unwrap());
        for (s, d) in suite.iter().zip(standard_depths()) {
            assert_eq!(s.needle_page, (d * 64.0).floor() as usize);
            assert_eq!(s.haystack.len(), 64 * 16);
            let at = s.needle_offset;
            assert_eq!(&s.haystack[at..at + s.needle.len()], &s.needle[..]);
            assert_eq!(at / 16, (at + s.needle.len() - 1) / 16);
        }
        assert!(gen_needle(&NeedleConfig { haystack_pages: 1, ..Default::default() }, 0).is_err());
    }

    #[test]
    fn needle_training_layout_matches_decoding() {
        let s = gen_needle(&NeedleConfig { haystack_pages: 4, ..Default::default() }, 2).unwrap();
        let (seq, start) = needle_training_sequence(&s, 16, 127).unwrap();
        assert_eq!(seq.n_pages(), 6);
        assert_eq!(start, 4 * 17 + 3);
        assert_eq!(seq.tokens[start], s.answer[0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn needle_key_occurs_once(seed in any::<u64>(), depth in 0.0f64..=1.0) {
            let s = gen_needle(&NeedleConfig { depth_fraction: depth, ..Default::default() }, seed).unwrap();
            prop_assert_eq!(s.haystack.iter().filter(|&&t| t == s.key()).count(), 1);
            prop_assert_eq!(s.haystack.windows(s.needle.len()).filter(|w| *w == &s.needle[..]).count(), 1);
        }
    }

    proptest! {
        #[test]
        fn labels_rederive_and_jsonl_round_trips(seed in any::<u64>(), negs in 1usize..12, qa in any::<bool>()) {
            let s = if qa {
                gen_synthetic_qa(&QaConfig::default(), seed).unwrap()
            } else {
                gen_pairwise(&PairwiseConfig { n_negatives: negs, ..Default::default() }, seed).unwrap()
            };
            prop_assert_eq!(s.meta["positive_page"].as_u64().unwrap() as usize, s.positive_page(16).unwrap());
            let text = to_jsonl(std::slice::from_ref(&s));
            let back = parse_jsonl(&text).unwrap();
            prop_assert_eq!(&back[0], &s);
            prop_assert_eq!(to_jsonl(&back), text);
        }
    }
}
