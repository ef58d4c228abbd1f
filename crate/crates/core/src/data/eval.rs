use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::NeedleSample;
use crate::engine::{generate, EngineConfig};
use crate::error::{Error, Result};
use crate::model::{forward, Model, SelectionPlan};
use crate::paging::AugmentedSequence;
use crate::retriever::{score_pages, select_pages, SelectionPolicy};

/// Per-layer scores of the last page's bookmark query against every earlier
/// page.
pub trait PageScorer {
    fn layer_scores(&mut self, seq: &AugmentedSequence, positive_page: usize) -> Result<Vec<Vec<f64>>>;
}

/// Scores from the model's bookmark projections.
pub struct ModelScorer<'a> {
    pub model: &'a Model,
    /// Plan used to encode the context.
    pub plan: SelectionPlan,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model, plan: SelectionPlan) -> Self {
        Self { model, plan }
    }
}

impl PageScorer for ModelScorer<'_> {
    fn layer_scores(&mut self, seq: &AugmentedSequence, _positive_page: usize) -> Result<Vec<Vec<f64>>> {
        let m = seq.n_pages();
        if m < 2 {
            return Err(Error::InvalidInput("need a context page and a query page".into()));
        }
        let out = forward(self.model, seq, &self.plan)?;
        out.layers
            .iter()
            .map(|l| {
                let keys: Vec<&[f64]> = (0..m - 1).map(|j| l.k_bmk.row(j)).collect();
                score_pages(l.q_bmk.row(m - 1), &keys, self.model.config.n_heads)
            })
            .collect()
    }
}

/// Uniform random scores; the chance baseline.
pub struct RandomScorer {
    rng: ChaCha8Rng,
    n_layers: usize,
}

impl RandomScorer {
    pub fn new(n_layers: usize, seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), n_layers }
    }
}

impl PageScorer for RandomScorer {
    fn layer_scores(&mut self, seq: &AugmentedSequence, _positive_page: usize) -> Result<Vec<Vec<f64>>> {
        let m = seq.n_pages().saturating_sub(1);
        Ok((0..self.n_layers).map(|_| (0..m).map(|_| self.rng.random::<f64>()).collect()).collect())
    }
}

/// Scores one on the labelled page and zero elsewhere; the ceiling.
pub struct OracleScorer {
    pub n_layers: usize,
}

impl PageScorer for OracleScorer {
    fn layer_scores(&mut self, seq: &AugmentedSequence, positive_page: usize) -> Result<Vec<Vec<f64>>> {
        let m = seq.n_pages().saturating_sub(1);
        let row: Vec<f64> = (0..m).map(|j| if j == positive_page { 1.0 } else { 0.0 }).collect();
        Ok(vec![row; self.n_layers])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub k: usize,
    pub sink_count: usize,
    pub samples: usize,
    pub per_layer: Vec<f64>,
    pub mean: f64,
    /// Mean over layers 1 and up. Layer-0 bookmark states are the shared
    /// bookmark embedding, so that layer cannot tell pages apart.
    pub content_mean: f64,
}

impl RecallReport {
    /// `layer_<i>`, `mean` and `content_mean` entries.
    pub fn to_map(&self) -> BTreeMap<String, f64> {
        let mut out: BTreeMap<String, f64> =
            self.per_layer.iter().enumerate().map(|(i, r)| (format!("layer_{i}"), *r)).collect();
        out.insert("mean".into(), self.mean);
        out.insert("content_mean".into(), self.content_mean);
        out
    }
}

/// Fraction of cases whose positive page is among the sinks plus the top `k`
/// scored pages, per layer.
pub fn eval_recall<S: PageScorer>(
    scorer: &mut S,
    cases: &[(AugmentedSequence, usize)],
    k: usize,
    sink_count: usize,
) -> Result<RecallReport> {
    if cases.is_empty() {
        return Err(Error::InvalidInput("no evaluation cases".into()));
    }
    let policy = SelectionPolicy { k_pages: sink_count + k, sink_count, local_count: 0 };
    let mut hits: Vec<usize> = Vec::new();
    for (seq, positive) in cases {
        let m = seq.n_pages().saturating_sub(1);
        if *positive >= m {
            return Err(Error::Label(format!("positive page {positive} outside {m} context pages")));
        }
        let scores = scorer.layer_scores(seq, *positive)?;
        if hits.is_empty() {
            hits = vec![0; scores.len()];
        } else if hits.len() != scores.len() {
            return Err(Error::Shape("scorer changed its layer count".into()));
        }
        for (l, s) in scores.iter().enumerate() {
            let sel = select_pages(s, &policy, l, m)?;
            if sel.selected.contains(positive) {
                hits[l] += 1;
            }
        }
    }
    let n = cases.len() as f64;
    let per_layer: Vec<f64> = hits.iter().map(|&h| h as f64 / n).collect();
    let mean = per_layer.iter().sum::<f64>() / per_layer.len().max(1) as f64;
    let upper = &per_layer[per_layer.len().min(1)..];
    let content_mean = if upper.is_empty() { mean } else { upper.iter().sum::<f64>() / upper.len() as f64 };
    Ok(RecallReport { k, sink_count, samples: cases.len(), per_layer, mean, content_mean })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeedleResult {
    pub depth_fraction: f64,
    pub config: String,
    pub generated: Vec<u32>,
    pub answer: Vec<u32>,
    pub exact: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NeedleReport {
    /// Exact-match rate keyed by depth, then by engine configuration name.
    pub accuracy: BTreeMap<String, BTreeMap<String, f64>>,
    pub results: Vec<NeedleResult>,
}

impl NeedleReport {
    /// Exact-match rate of one configuration over all depths.
    pub fn overall(&self, config: &str) -> Option<f64> {
        let rs: Vec<&NeedleResult> = self.results.iter().filter(|r| r.config == config).collect();
        (!rs.is_empty()).then(|| rs.iter().filter(|r| r.exact).count() as f64 / rs.len() as f64)
    }
}

/// Decode each sample's answer under every named engine configuration and
/// score exact matches.
pub fn eval_needle(model: &Model, samples: &[NeedleSample], configs: &[(String, EngineConfig)]) -> Result<NeedleReport> {
    if samples.is_empty() || configs.is_empty() {
        return Err(Error::InvalidInput("needle evaluation needs samples and configurations".into()));
    }
    let mut counts: BTreeMap<(String, String), (usize, usize)> = BTreeMap::new();
    let mut results = Vec::new();
    for s in samples {
        let depth = format!("{:.2}", s.depth_fraction);
        for (name, cfg) in configs {
            let cfg = EngineConfig { max_new_tokens: s.answer.len(), end_token: None, ..cfg.clone() };
            let (generated, _) = generate(model, &cfg, &s.haystack, &s.question)?;
            let exact = generated == s.answer;
            let c = counts.entry((depth.clone(), name.clone())).or_default();
            c.0 += usize::from(exact);
            c.1 += 1;
            results.push(NeedleResult {
                depth_fraction: s.depth_fraction,
                config: name.clone(),
                generated: generated.iter().map(|&t| t as u32).collect(),
                answer: s.answer.iter().map(|&t| t as u32).collect(),
                exact,
            });
        }
    }
    let mut accuracy: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for ((d, name), (hit, n)) in counts {
        accuracy.entry(d).or_default().insert(name, hit as f64 / n as f64);
    }
    Ok(NeedleReport { accuracy, results })
}

/// Combined metrics file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default)]
    pub recall: BTreeMap<String, f64>,
    #[serde(default)]
    pub needle: BTreeMap<String, BTreeMap<String, f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_pairwise, PairwiseConfig};

    fn cases(n: u64) -> Vec<(AugmentedSequence, usize)> {
        (0..n)
            .map(|s| {
                let p = gen_pairwise(&PairwiseConfig::default(), s).unwrap();
                (p.sequence(16, 127).unwrap(), p.positive_page(16).unwrap())
            })
            .collect()
    }

    #[test]
    fn oracle_recall_is_one() {
        let r = eval_recall(&mut OracleScorer { n_layers: 3 }, &cases(20), 1, 1).unwrap();
        assert_eq!(r.per_layer, vec![1.0; 3]);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn random_recall_is_near_chance() {
        // 9 context pages, the sink is never positive, so chance is 1/8
        let r = eval_recall(&mut RandomScorer::new(1, 5), &cases(800), 1, 1).unwrap();
        assert!((r.mean - 0.125).abs() < 0.04, "{}", r.mean);
    }

    #[test]
    fn empty_and_bad_labels_rejected() {
        assert!(matches!(eval_recall(&mut OracleScorer { n_layers: 1 }, &[], 1, 1), Err(Error::InvalidInput(_))));
        let mut c = cases(1);
        c[0].1 = 99;
        assert!(matches!(eval_recall(&mut OracleScorer { n_layers: 1 }, &c, 1, 1), Err(Error::Label(_))));
    }
}
