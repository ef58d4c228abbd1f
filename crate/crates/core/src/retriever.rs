//! Page retrieval: score past pages by bookmark query/key dot products and
//! pick a top-k set that always contains the sink and local pages.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::paging::PagedKvStore;

/// How many pages a query page may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    /// Page budget, sinks included.
    pub k_pages: usize,
    pub sink_count: usize,
    /// Most recent pages always kept, on top of `k_pages`.
    pub local_count: usize,
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        Self { k_pages: 16, sink_count: 1, local_count: 1 }
    }
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.k_pages == 0 {
            return Err(Error::InvalidConfig("k_pages must be at least 1".into()));
        }
        if self.sink_count == 0 || self.sink_count > self.k_pages {
            return Err(Error::InvalidConfig(format!(
                "sink_count must lie in 1..={}, got {}",
                self.k_pages, self.sink_count
            )));
        }
        Ok(())
    }

    /// Pages attendable per step, i.e. `k + local`.
    pub fn page_budget(&self) -> usize {
        self.k_pages + self.local_count
    }
}

/// Outcome of one retrieval for one (layer, query page).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSelection {
    pub layer: usize,
    pub query_page_index: usize,
    /// Score of every candidate page `0..query_page_index`, by page index.
    pub candidate_scores: Vec<f64>,
    /// Ascending page indices.
    pub selected: Vec<usize>,
    pub k: usize,
    pub sink_count: usize,
    pub local_count: usize,
}

/// One score per past page: the sum over heads of per-head dot products
/// between the query bookmark and each page's bookmark key.
pub fn score_pages<K: AsRef<[f64]>>(q_bmk: &[f64], keys: &[K], n_heads: usize) -> Result<Vec<f64>> {
    if keys.is_empty() {
        return Err(Error::InvalidInput("no past pages to score".into()));
    }
    if n_heads == 0 || q_bmk.len() % n_heads != 0 {
        return Err(Error::Shape(format!("query of width {} does not split into {n_heads} heads", q_bmk.len())));
    }
    let hd = q_bmk.len() / n_heads;
    keys.iter()
        .enumerate()
        .map(|(j, k)| {
            let k = k.as_ref();
            if k.len() != q_bmk.len() {
                return Err(Error::Shape(format!("key {j} has width {}, query {}", k.len(), q_bmk.len())));
            }
            Ok((0..n_heads)
                .map(|h| {
                    let span = h * hd..(h + 1) * hd;
                    q_bmk[span.clone()].iter().zip(&k[span]).map(|(a, b)| a * b).sum::<f64>()
                })
                .sum())
        })
        .collect()
}

/// Sinks, then the `local_count` most recent pages, then the best-scoring
/// remaining pages until `min(k + local_count, m)` pages are chosen. Ties go to
/// the lower page index.
pub fn select_pages(
    scores: &[f64],
    policy: &SelectionPolicy,
    layer: usize,
    query_page_index: usize,
) -> Result<RetrievalSelection> {
    policy.validate()?;
    if let Some(j) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("score of page {j} is not finite")));
    }
    let m = scores.len();
    let target = policy.page_budget().min(m);
    let mut chosen = vec![false; m];
    for c in chosen.iter_mut().take(policy.sink_count.min(m)) {
        *c = true;
    }
    for c in chosen.iter_mut().skip(m.saturating_sub(policy.local_count)) {
        *c = true;
    }
    let have = chosen.iter().filter(|c| **c).count();
    let mut rest: Vec<usize> = (0..m).filter(|&j| !chosen[j]).collect();
    rest.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    for &j in rest.iter().take(target.saturating_sub(have)) {
        chosen[j] = true;
    }
    Ok(RetrievalSelection {
        layer,
        query_page_index,
        candidate_scores: scores.to_vec(),
        selected: (0..m).filter(|&j| chosen[j]).collect(),
        k: policy.k_pages,
        sink_count: policy.sink_count,
        local_count: policy.local_count,
    })
}

/// A selection policy with an invocation counter, so callers can audit how
/// often scoring ran.
#[derive(Debug, Default)]
pub struct Retriever {
    pub policy: SelectionPolicy,
    invocations: AtomicUsize,
}

impl Retriever {
    pub fn new(policy: SelectionPolicy) -> Result<Self> {
        policy.validate()?;
        Ok(Self { policy, invocations: AtomicUsize::new(0) })
    }

    /// Score and select in one step; counts as one invocation.
    pub fn retrieve<K: AsRef<[f64]>>(
        &self,
        layer: usize,
        query_page_index: usize,
        q_bmk: &[f64],
        keys: &[K],
        n_heads: usize,
    ) -> Result<RetrievalSelection> {
        self.invocations.fetch_add(1, Ordering::Relaxed);
        let scores = score_pages(q_bmk, keys, n_heads)?;
        select_pages(&scores, &self.policy, layer, query_page_index)
    }

    pub fn invocations(&self) -> usize {
        self.invocations.load(Ordering::Relaxed)
    }

    pub fn reset_invocations(&self) {
        self.invocations.store(0, Ordering::Relaxed);
    }
}

/// Bookmark keys of pages `0..query_page` at `layer`, widened to `f64`.
pub fn layer_candidates(store: &PagedKvStore, layer: usize, query_page: usize) -> Result<Vec<Vec<f64>>> {
    let keys: Vec<Vec<f64>> = store
        .bookmark_keys(layer)?
        .into_iter()
        .filter(|(p, _)| *p < query_page)
        .map(|(_, k)| k.into_iter().map(f64::from).collect())
        .collect();
    if keys.len() != query_page || keys.is_empty() {
        return Err(Error::InvalidState(format!(
            "layer {layer} holds {} of the {query_page} pages before the query; prefill first",
            keys.len()
        )));
    }
    Ok(keys)
}

/// Per-layer retrieval for the query page from the store's bookmark index,
/// computed once and reused for every generated token. The query page never
/// retrieves itself. `q_bmk[layer]` is the query page's bookmark query.
pub fn decode_selection(
    retriever: &Retriever,
    store: &PagedKvStore,
    query_page: usize,
    q_bmk: &[Vec<f64>],
    n_heads: usize,
) -> Result<Vec<RetrievalSelection>> {
    let n_layers = store.config().n_layers;
    if q_bmk.len() != n_layers {
        return Err(Error::Shape(format!("{} bookmark queries for {n_layers} layers", q_bmk.len())));
    }
    (0..n_layers)
        .map(|layer| {
            let keys = layer_candidates(store, layer, query_page)?;
            retriever.retrieve(layer, query_page, &q_bmk[layer], &keys, n_heads)
        })
        .collect()
}

/// Layer-by-page score matrix for one query page.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrace {
    pub query_page_index: usize,
    /// `scores[layer][page]`.
    pub scores: Vec<Vec<f64>>,
}

impl ScoreTrace {
    pub fn from_selections(selections: &[RetrievalSelection]) -> Result<Self> {
        let first = selections.first().ok_or(Error::EmptyInput)?;
        let mut sorted: Vec<&RetrievalSelection> = selections.iter().collect();
        sorted.sort_by_key(|s| s.layer);
        Ok(Self {
            query_page_index: first.query_page_index,
            scores: sorted.iter().map(|s| s.candidate_scores.clone()).collect(),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.scores.len(), self.scores.first().map_or(0, Vec::len))
    }

    /// `layer,page,score`, one record per cell.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "layer,page,score")?;
        for (layer, row) in self.scores.iter().enumerate() {
            for (page, s) in row.iter().enumerate() {
                writeln!(out, "{layer},{page},{s}")?;
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii csv")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn policy(k: usize, sink: usize, local: usize) -> SelectionPolicy {
        SelectionPolicy { k_pages: k, sink_count: sink, local_count: local }
    }

    #[test]
    fn single_head_scores_are_dot_products() {
        let s = score_pages(&[1.0, 2.0], &[vec![1.0, 0.0], vec![0.0, 1.0]], 1).unwrap();
        assert_eq!(s, vec![1.0, 2.0]);
    }

    #[test]
    fn orthogonal_query_scores_zero() {
        let s = score_pages(&[1.0, 0.0, 0.0, 0.0], &[vec![0.0, 3.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 5.0]], 2).unwrap();
        assert_eq!(s, vec![0.0, 0.0]);
    }

    #[test]
    fn head_split_matches_concatenated_dot() {
        let q = [0.3, -1.2, 0.7, 2.2, -0.4, 0.9];
        let keys = [vec![1.5, 0.2, -0.3, 0.8, 0.1, -2.0], vec![-0.6, 0.6, 1.1, 0.0, 0.5, 0.25]];
        let s = score_pages(&q, &keys, 2).unwrap();
        for (sj, k) in s.iter().zip(&keys) {
            let oracle: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
            assert!((sj - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn head_mismatch_is_shape_error() {
        assert!(matches!(score_pages(&[1.0, 2.0, 3.0], &[vec![1.0, 2.0, 3.0]], 2), Err(Error::Shape(_))));
        assert!(matches!(score_pages(&[1.0, 2.0], &[vec![1.0, 2.0, 3.0]], 1), Err(Error::Shape(_))));
    }

    #[test]
    fn ties_break_toward_lower_page() {
        let sel = select_pages(&[0.0, 0.1, 0.9, 0.3, 0.9], &policy(3, 1, 0), 0, 5).unwrap();
        assert_eq!(sel.selected, vec![0, 2, 4]);
        let sel = select_pages(&[0.0, 0.1, 0.9, 0.3, 0.9], &policy(2, 1, 0), 0, 5).unwrap();
        assert_eq!(sel.selected, vec![0, 2]);
    }

    #[test]
    fn saturation_selects_everything() {
        let sel = select_pages(&[0.5, -1.0, 2.0], &policy(4, 1, 1), 1, 3).unwrap();
        assert_eq!(sel.selected, vec![0, 1, 2]);
    }

    #[test]
    fn paper_budget_is_about_two_thousand_entries() {
        let p = SelectionPolicy::default();
        assert_eq!(p.k_pages * (128 + 1), 2064);
    }

    #[test]
    fn bad_policies_are_rejected() {
        assert!(matches!(select_pages(&[1.0], &policy(0, 0, 0), 0, 1), Err(Error::InvalidConfig(_))));
        assert!(matches!(select_pages(&[1.0], &policy(2, 0, 0), 0, 1), Err(Error::InvalidConfig(_))));
        assert!(matches!(select_pages(&[1.0], &policy(2, 3, 0), 0, 1), Err(Error::InvalidConfig(_))));
        assert!(matches!(select_pages(&[f64::NAN], &policy(1, 1, 0), 0, 1), Err(Error::Numerical(_))));
    }

    #[test]
    fn score_trace_csv_has_one_record_per_cell() {
        let sels: Vec<_> = (0..4)
            .map(|l| select_pages(&(0..10).map(|p| (p * l) as f64).collect::<Vec<_>>(), &policy(2, 1, 0), l, 10).unwrap())
            .collect();
        let t = ScoreTrace::from_selections(&sels).unwrap();
        assert_eq!(t.shape(), (4, 10));
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "layer,page,score");
        assert_eq!(lines.len(), 41);
        assert_eq!(lines[40], "3,9,27");
    }

    proptest! {
        #[test]
        fn selection_invariants(
            raw in prop::collection::vec(-40i32..40, 1..40),
            k in 1usize..10,
            sink_raw in 1usize..4,
            local in 0usize..4,
            shift in 1u32..1000,
        ) {
            // eighths are exact, so shifting cannot merge or split ties
            let scores: Vec<f64> = raw.iter().map(|&r| r as f64 / 8.0).collect();
            let sink = sink_raw.min(k);
            let p = policy(k, sink, local);
            let m = scores.len();
            let sel = select_pages(&scores, &p, 0, m).unwrap();
            prop_assert_eq!(sel.selected.len(), (k + local).min(m));
            prop_assert!(sel.selected.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(sel.selected.contains(&0));
            for s in 0..sink.min(m) {
                prop_assert!(sel.selected.contains(&s));
            }
            for j in m.saturating_sub(local)..m {
                prop_assert!(sel.selected.contains(&j));
            }
            // determinism and shift invariance
            prop_assert_eq!(&select_pages(&scores, &p, 0, m).unwrap().selected, &sel.selected);
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift as f64).collect();
            let sel2 = select_pages(&shifted, &p, 0, m).unwrap();
            prop_assert_eq!(&sel2.selected, &sel.selected);
            // every retrieved page beats or ties every unselected non-forced page
            let forced = |j: usize| j < sink || j + local >= m;
            let lo = sel.selected.iter().filter(|&&j| !forced(j)).map(|&j| scores[j]).fold(f64::INFINITY, f64::min);
            for j in (0..m).filter(|j| !sel.selected.contains(j)) {
                prop_assert!(scores[j] <= lo);
            }
        }
    }
}
