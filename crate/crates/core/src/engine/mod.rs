//! Streaming prefill and one-shot-retrieval decode over the paged store,
//! plus the full-attention and sliding-window reference pipelines.

mod oracle;
mod trace;

pub use oracle::{full_attention_oracle, sliding_window_baseline};
pub use trace::{Phase, RunTrace, StepRecord};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{attend_selected, embed_rows, ffn_residual, final_logits, project_qkv, Model, WindowQkv};
use crate::paging::{
    partition, AugmentedSequence, KvMatrix, PageKv, PagedKvStore, PositionKind, StoreConfig, TokenId,
};
use crate::retriever::{Retriever, SelectionPolicy};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineMode {
    Retrieval,
    FullAttention,
    SlidingWindow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub k_pages: usize,
    pub sink_count: usize,
    pub local_count: usize,
    /// Per-layer hot-tier bound in KV entries. `None` means
    /// `(k + local + 1)(w + 1)` in the sparse modes and unbounded for full
    /// attention.
    pub hot_budget_tokens: Option<usize>,
    pub max_new_tokens: usize,
    pub mode: EngineMode,
    /// Recent pages kept by the sliding-window mode.
    pub window_pages: usize,
    pub end_token: Option<TokenId>,
    pub spill_dir: Option<PathBuf>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            k_pages: 16,
            sink_count: 1,
            local_count: 1,
            hot_budget_tokens: None,
            max_new_tokens: 32,
            mode: EngineMode::Retrieval,
            window_pages: 16,
            end_token: None,
            spill_dir: None,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sink_count == 0 {
            return Err(Error::InvalidConfig("sink_count must be at least 1".into()));
        }
        if self.mode == EngineMode::Retrieval && self.k_pages < self.sink_count + self.local_count {
            return Err(Error::InvalidConfig(format!(
                "k_pages {} is below sink_count + local_count = {}",
                self.k_pages,
                self.sink_count + self.local_count
            )));
        }
        if self.mode == EngineMode::SlidingWindow && self.window_pages == 0 {
            return Err(Error::InvalidConfig("window_pages must be at least 1".into()));
        }
        if self.hot_budget_tokens == Some(0) {
            return Err(Error::InvalidConfig("hot budget must be positive".into()));
        }
        Ok(())
    }

    pub fn policy(&self) -> SelectionPolicy {
        SelectionPolicy { k_pages: self.k_pages, sink_count: self.sink_count, local_count: self.local_count }
    }

    /// Pages attendable per step besides the current window.
    pub fn page_budget(&self) -> Option<usize> {
        match self.mode {
            EngineMode::Retrieval => Some(self.k_pages + self.local_count),
            EngineMode::SlidingWindow => Some(self.sink_count + self.window_pages),
            EngineMode::FullAttention => None,
        }
    }

    /// Sliding-window configuration attending to as many pages as this
    /// retrieval configuration.
    pub fn sliding_window_equivalent(&self) -> Self {
        Self {
            mode: EngineMode::SlidingWindow,
            window_pages: (self.k_pages + self.local_count).saturating_sub(self.sink_count).max(1),
            ..self.clone()
        }
    }

    pub fn resolved_hot_budget(&self, page_size: usize) -> Option<usize> {
        self.hot_budget_tokens.or_else(|| self.page_budget().map(|p| (p + 1) * (page_size + 1)))
    }
}

/// Per-layer keys/values of the current window, kept across decode steps.
struct Window {
    k: Vec<f64>,
    v: Vec<f64>,
    positions: Vec<usize>,
}

struct EncodedPage {
    /// Logits at the page's normal rows.
    logits: Mat,
    windows: Vec<Window>,
    q_bmk: Vec<Vec<f64>>,
}

/// One sequence's inference state.
pub struct Engine<'m> {
    model: &'m Model,
    config: EngineConfig,
    store: PagedKvStore,
    retriever: Retriever,
    trace: RunTrace,
    pages_encoded: usize,
    next_position: usize,
    step: usize,
}

impl<'m> Engine<'m> {
    pub fn new(model: &'m Model, config: EngineConfig) -> Result<Self> {
        config.validate()?;
        model.config.validate()?;
        let store = PagedKvStore::new(StoreConfig {
            n_layers: model.config.n_layers,
            d_model: model.config.d_model,
            hot_budget_tokens: config.resolved_hot_budget(model.config.page_size),
            sink_count: config.sink_count,
            spill_dir: config.spill_dir.clone(),
        })?;
        let retriever = Retriever::new(SelectionPolicy {
            k_pages: config.k_pages.max(config.sink_count),
            ..config.policy()
        })?;
        Ok(Self { model, config, store, retriever, trace: RunTrace::default(), pages_encoded: 0, next_position: 0, step: 0 })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn store(&self) -> &PagedKvStore {
        &self.store
    }

    pub fn retriever(&self) -> &Retriever {
        &self.retriever
    }

    pub fn trace(&self) -> &RunTrace {
        &self.trace
    }

    pub fn into_trace(self) -> RunTrace {
        self.trace
    }

    pub fn pages_encoded(&self) -> usize {
        self.pages_encoded
    }

    /// Encode the pages of `seq` one at a time and return the logits at every
    /// normal position. Must be called on a fresh engine.
    pub fn prefill(&mut self, seq: &AugmentedSequence) -> Result<Mat> {
        if self.pages_encoded != 0 {
            return Err(Error::InvalidState("prefill already ran on this engine".into()));
        }
        let vocab = self.model.config.vocab_size;
        let mut rows = Vec::new();
        for (i, span) in seq.page_spans.iter().enumerate() {
            let page = &seq.pages[i];
            if page.tokens.len() + 1 != span.len() || span.start != self.next_position {
                return Err(Error::CorruptPages(format!("page {i} does not match its span")));
            }
            let enc = self.encode_page(&page.tokens, false)?;
            rows.extend_from_slice(&enc.logits.data);
        }
        Mat::from_vec(rows.len() / vocab, vocab, rows)
    }

    /// Greedy generation after `query` (placed on fresh final page(s)).
    /// Retrieval for the final query page runs once per layer; its selection
    /// is frozen for every generated token.
    pub fn decode(&mut self, query: &[TokenId]) -> Result<Vec<TokenId>> {
        if self.pages_encoded == 0 {
            return Err(Error::InvalidState("decode needs a completed prefill".into()));
        }
        let cfg = &self.model.config;
        let pages = partition(query, cfg.page_size, cfg.bookmark_token())?;
        let (last, leading) = pages.split_last().expect("partition is non-empty");
        for p in leading {
            self.encode_page(&p.tokens, false)?;
        }
        let before = self.retriever.invocations();
        let enc = self.encode_page(&last.tokens, true)?;
        self.trace.decode_scorings = self.retriever.invocations() - before;
        self.trace.query_bookmark_q = enc.q_bmk.clone();
        let query_page = self.pages_encoded - 1;

        let n_layers = cfg.n_layers;
        let selected: Vec<Vec<usize>> = (0..n_layers).map(|l| self.frozen_selection(l, query_page)).collect();
        let fetched: Vec<Vec<PageKv>> =
            (0..n_layers).map(|l| self.store.fetch_pages(l, &selected[l])).collect::<Result<_>>()?;
        let mut windows = enc.windows;
        let mut logits = enc.logits.row(enc.logits.rows - 1).to_vec();
        let mut out = Vec::new();
        while out.len() < self.config.max_new_tokens {
            let token = greedy(&logits, cfg.bookmark_token());
            out.push(token);
            self.trace.generated.push(token);
            if Some(token) == self.config.end_token || out.len() == self.config.max_new_tokens {
                break;
            }
            logits = self.decode_step(token, query_page, &selected, &fetched, &mut windows)?;
        }
        Ok(out)
    }

    fn frozen_selection(&self, layer: usize, query_page: usize) -> Vec<usize> {
        match self.config.mode {
            EngineMode::Retrieval => self
                .trace
                .selections
                .iter()
                .rev()
                .find(|s| s.layer == layer && s.query_page_index == query_page)
                .map(|s| s.selected.clone())
                .unwrap_or_default(),
            EngineMode::FullAttention => (0..query_page).collect(),
            EngineMode::SlidingWindow => self.window_selection(query_page),
        }
    }

    fn window_selection(&self, page: usize) -> Vec<usize> {
        (0..page).filter(|&j| j < self.config.sink_count || j + self.config.window_pages >= page).collect()
    }

    fn decode_step(
        &mut self,
        token: TokenId,
        query_page: usize,
        selected: &[Vec<usize>],
        fetched: &[Vec<PageKv>],
        windows: &mut [Window],
    ) -> Result<Vec<f64>> {
        let model = self.model;
        let pos = self.next_position;
        self.next_position += 1;
        let kinds = [PositionKind::Normal];
        let mut x = embed_rows(model, &[token], &kinds)?;
        for l in 0..model.config.n_layers {
            let qkv = project_qkv(model, l, &x, &kinds)?;
            let w = &mut windows[l];
            w.k.extend_from_slice(&qkv.k.data);
            w.v.extend_from_slice(&qkv.v.data);
            w.positions.push(pos);
            let d = model.config.d_model;
            let n = w.positions.len();
            let window = WindowQkv {
                q: qkv.q,
                k: Mat::from_vec(n, d, w.k.clone())?,
                v: Mat::from_vec(n, d, w.v.clone())?,
                positions: w.positions.clone(),
            };
            let att = attend_selected(model, l, &window, &fetched[l])?;
            x.add_assign(&att);
            ffn_residual(model, l, &mut x);
            let attended = fetched[l].iter().map(PageKv::kv_entries).sum::<usize>() + n;
            self.trace.steps.push(StepRecord {
                step: self.step,
                phase: Phase::Decode,
                page: query_page,
                layer: l,
                attended_kv: attended,
                window_len: n,
                selected_pages: selected[l].clone(),
            });
        }
        self.step += 1;
        self.trace.memory.push(self.store.memory_report());
        Ok(final_logits(model, &x).row(0).to_vec())
    }

    fn encode_page(&mut self, tokens: &[TokenId], is_query: bool) -> Result<EncodedPage> {
        let model = self.model;
        let cfg = &model.config;
        let (d, w) = (cfg.d_model, tokens.len());
        let page = self.pages_encoded;
        let start = self.next_position;
        let mut all_tokens = tokens.to_vec();
        all_tokens.push(cfg.bookmark_token());
        let mut kinds = vec![PositionKind::Normal; w];
        kinds.push(PositionKind::Bookmark);
        let positions: Vec<usize> = (start..start + w + 1).collect();
        let mut x = embed_rows(model, &all_tokens, &kinds)?;
        let mut windows = Vec::with_capacity(cfg.n_layers);
        let mut q_bmk = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let qkv = project_qkv(model, l, &x, &kinds)?;
            let qb = qkv.q.row(w).to_vec();
            let selected = if page == 0 {
                Vec::new()
            } else {
                match self.config.mode {
                    EngineMode::Retrieval => {
                        let keys = crate::retriever::layer_candidates(&self.store, l, page)?;
                        let sel = self.retriever.retrieve(l, page, &qb, &keys, cfg.n_heads)?;
                        let s = sel.selected.clone();
                        self.trace.selections.push(sel);
                        s
                    }
                    EngineMode::FullAttention => (0..page).collect(),
                    EngineMode::SlidingWindow => self.window_selection(page),
                }
            };
            let fetched = self.store.fetch_pages(l, &selected)?;
            let window = WindowQkv { q: qkv.q.clone(), k: qkv.k.clone(), v: qkv.v.clone(), positions: positions.clone() };
            let att = attend_selected(model, l, &window, &fetched)?;
            x.add_assign(&att);
            ffn_residual(model, l, &mut x);
            self.trace.steps.push(StepRecord {
                step: self.step,
                phase: Phase::Prefill,
                page,
                layer: l,
                attended_kv: fetched.iter().map(PageKv::kv_entries).sum::<usize>() + w + 1,
                window_len: w + 1,
                selected_pages: selected,
            });
            let narrow = |m: &Mat, rows: std::ops::Range<usize>| -> Vec<f32> {
                m.data[rows.start * d..rows.end * d].iter().map(|&v| v as f32).collect()
            };
            self.store.store_page(PageKv {
                layer: l,
                page_index: page,
                start_position: start,
                normal_keys: KvMatrix::new(w, d, narrow(&qkv.k, 0..w))?,
                normal_values: KvMatrix::new(w, d, narrow(&qkv.v, 0..w))?,
                bookmark_key: narrow(&qkv.k, w..w + 1),
                bookmark_value: narrow(&qkv.v, w..w + 1),
            })?;
            if is_query {
                windows.push(Window { k: qkv.k.data, v: qkv.v.data, positions: positions.clone() });
            }
            q_bmk.push(qb);
        }
        let normal_rows: Vec<usize> = (0..w).collect();
        let logits = final_logits(model, &x.gather_rows(&normal_rows));
        self.pages_encoded += 1;
        self.next_position += w + 1;
        self.step += 1;
        self.trace.memory.push(self.store.memory_report());
        Ok(EncodedPage { logits, windows, q_bmk })
    }
}

/// Highest-logit token, never the bookmark; ties go to the lower id.
pub fn greedy(logits: &[f64], bookmark: TokenId) -> TokenId {
    let mut best = None;
    for (t, &v) in logits.iter().enumerate() {
        if t as TokenId == bookmark {
            continue;
        }
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((t, v));
        }
    }
    best.map_or(0, |(t, _)| t as TokenId)
}

/// Prefill `context` and decode after `query` in one call.
pub fn generate(
    model: &Model,
    config: &EngineConfig,
    context: &[TokenId],
    query: &[TokenId],
) -> Result<(Vec<TokenId>, RunTrace)> {
    let seq = AugmentedSequence::from_segments(&[context], model.config.page_size, model.config.bookmark_token())?;
    let mut engine = Engine::new(model, config.clone())?;
    engine.prefill(&seq)?;
    let out = engine.decode(query)?;
    Ok((out, engine.into_trace()))
}
