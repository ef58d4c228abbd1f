//! Differentiable forward pass over an augmented sequence.
//!
//! Streaming page-by-page encoding is expressed as a block-sparse mask: the
//! rows of page `i` at layer `L` see the rows of the pages selected for
//! `(L, i)` plus the causal prefix of page `i` itself. Because a selection at
//! layer `L` only depends on layer-`L` inputs, computing every page of a
//! layer at once gives the same result as encoding pages one at a time.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::params::{FreezeMask, ModelParams};
use super::Model;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::paging::{AugmentedSequence, PositionKind};
use crate::retriever::{select_pages, score_pages, RetrievalSelection, SelectionPolicy};
use crate::tensor::Mat;

/// Which earlier pages each page attends to, per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPlan {
    /// Every earlier page: plain causal attention.
    Full,
    /// `pages[layer][page]` lists the earlier pages visible to `page`.
    Fixed(Vec<Vec<Vec<usize>>>),
    /// Bookmark retrieval at every layer with the given policy.
    Retrieval(SelectionPolicy),
    /// The first `sink_count` pages plus the `window_pages` most recent ones.
    SlidingWindow { sink_count: usize, window_pages: usize },
    /// The decoding layout: pages up to `query_page` follow `base`; every
    /// later page sees the query page's selection, the query page and the
    /// pages in between, as generated tokens do.
    Decode { base: Box<SelectionPlan>, query_page: usize },
}

impl SelectionPlan {
    fn validate(&self, n_layers: usize, n_pages: usize) -> Result<()> {
        match self {
            SelectionPlan::Full => Ok(()),
            SelectionPlan::Retrieval(p) => p.validate(),
            SelectionPlan::Decode { base, .. } => {
                if matches!(**base, SelectionPlan::Decode { .. }) {
                    return Err(Error::InvalidSelection("decode plans do not nest".into()));
                }
                base.validate(n_layers, n_pages)
            }
            SelectionPlan::SlidingWindow { window_pages, .. } => {
                if *window_pages == 0 {
                    return Err(Error::InvalidConfig("window_pages must be at least 1".into()));
                }
                Ok(())
            }
            SelectionPlan::Fixed(layers) => {
                if layers.len() != n_layers {
                    return Err(Error::InvalidSelection(format!(
                        "plan covers {} layers, model has {n_layers}",
                        layers.len()
                    )));
                }
                for (l, pages) in layers.iter().enumerate() {
                    if pages.len() != n_pages {
                        return Err(Error::InvalidSelection(format!(
                            "layer {l} plan covers {} pages, sequence has {n_pages}",
                            pages.len()
                        )));
                    }
                    for (i, sel) in pages.iter().enumerate() {
                        if sel.iter().any(|&j| j >= i) {
                            return Err(Error::InvalidSelection(format!(
                                "layer {l} page {i} selects a page that is not earlier"
                            )));
                        }
                    }
                }
                Ok(())
            }
        }
    }
}

/// Tape handles for every parameter tensor, by tensor id.
pub struct ParamVars(pub Vec<Var>);

impl ParamVars {
    pub fn get(&self, id: usize) -> Var {
        self.0[id]
    }
}

/// Put every tensor on the tape. With a mask, frozen tensors become constants
/// so their gradient is exactly zero.
pub fn bind_params(tape: &mut Tape, params: &ModelParams, mask: Option<&FreezeMask>) -> ParamVars {
    ParamVars(
        params
            .tensors
            .iter()
            .enumerate()
            .map(|(id, t)| match mask {
                Some(m) if !m.is_trainable(id) => tape.constant(t.value.clone()),
                _ => tape.param(id, t.value.clone()),
            })
            .collect(),
    )
}

/// Tape handles produced by [`forward_tape`].
pub struct TapeForward {
    /// Logits at normal positions, in sequence order.
    pub logits: Var,
    /// Per layer: bookmark queries/keys before rotation, one row per page.
    pub q_bmk: Vec<Var>,
    pub k_bmk: Vec<Var>,
    /// Per layer, per page: selected earlier pages.
    pub selections: Vec<Vec<Vec<usize>>>,
    /// Retrieval outcomes when the plan retrieves (pages with candidates only).
    pub retrievals: Vec<Vec<RetrievalSelection>>,
    /// Layer inputs followed by the final residual stream.
    pub hidden: Vec<Var>,
    pub v_bmk: Vec<Var>,
}

fn page_selection(
    plan: &SelectionPlan,
    layer: usize,
    page: usize,
    scores: impl FnOnce() -> Result<Vec<f64>>,
) -> Result<(Vec<usize>, Option<RetrievalSelection>)> {
    Ok(match plan {
        SelectionPlan::Decode { base, .. } => return page_selection(base, layer, page, scores),
        SelectionPlan::Full => ((0..page).collect(), None),
        SelectionPlan::Fixed(p) => {
            let mut s = p[layer][page].clone();
            s.sort_unstable();
            s.dedup();
            (s, None)
        }
        SelectionPlan::SlidingWindow { sink_count, window_pages } => (
            (0..page).filter(|&j| j < *sink_count || j + window_pages >= page).collect(),
            None,
        ),
        SelectionPlan::Retrieval(policy) => {
            if page == 0 {
                (Vec::new(), None)
            } else {
                let sel = select_pages(&scores()?, policy, layer, page)?;
                (sel.selected.clone(), Some(sel))
            }
        }
    })
}

/// Record the forward pass on `tape`.
pub fn forward_tape(
    tape: &mut Tape,
    model: &Model,
    vars: &ParamVars,
    seq: &AugmentedSequence,
    plan: &SelectionPlan,
) -> Result<TapeForward> {
    let cfg = &model.config;
    if seq.is_empty() {
        return Err(Error::EmptyInput);
    }
    if seq.len() > cfg.max_positions {
        return Err(Error::InvalidInput(format!(
            "sequence of {} positions exceeds max_positions {}",
            seq.len(),
            cfg.max_positions
        )));
    }
    let n_pages = seq.n_pages();
    plan.validate(cfg.n_layers, n_pages)?;
    let normal = seq.normal_positions();
    let bmk = seq.bookmark_positions();
    let positions: Vec<usize> = (0..seq.len()).collect();
    let tok_rows: Vec<usize> = normal
        .iter()
        .map(|&p| {
            let t = seq.tokens[p] as usize;
            if t + 1 >= cfg.vocab_size {
                Err(Error::InvalidInput(format!("token {t} at position {p} is not a normal id")))
            } else {
                Ok(t)
            }
        })
        .collect::<Result<_>>()?;

    let emb_n = tape.gather_rows(vars.get(ModelParams::TOK_EMBEDDING), &tok_rows);
    let emb_b = tape.gather_rows(vars.get(ModelParams::BOOKMARK_EMBEDDING), &vec![0; bmk.len()]);
    let mut x = tape.interleave(emb_n, &normal, emb_b, &bmk);

    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    let mut out = TapeForward {
        logits: x,
        q_bmk: Vec::new(),
        k_bmk: Vec::new(),
        v_bmk: Vec::new(),
        selections: Vec::new(),
        retrievals: Vec::new(),
        hidden: Vec::new(),
    };
    for l in 0..cfg.n_layers {
        out.hidden.push(x);
        let id = |n: &str| vars.get(ModelParams::layer_tensor(l, n));
        let h = tape.rms_norm(x, id("attn_norm"));
        let hn = tape.gather_rows(h, &normal);
        let hb = tape.gather_rows(h, &bmk);
        let mut proj = |wn: &str, wb: &str| {
            let pn = tape.matmul(hn, id(wn));
            let pb = tape.matmul(hb, id(wb));
            (tape.interleave(pn, &normal, pb, &bmk), pb)
        };
        let (q, qb) = proj("wq", "wq_bmk");
        let (k, kb) = proj("wk", "wk_bmk");
        let (v, vb) = proj("wv", "wv_bmk");
        out.q_bmk.push(qb);
        out.k_bmk.push(kb);
        out.v_bmk.push(vb);

        let mut layer_sel: Vec<Vec<usize>> = Vec::with_capacity(n_pages);
        let mut layer_ret = Vec::new();
        for i in 0..n_pages {
            if let SelectionPlan::Decode { query_page, .. } = plan {
                if i > *query_page {
                    let mut sel = layer_sel[*query_page].clone();
                    sel.extend(*query_page..i);
                    layer_sel.push(sel);
                    continue;
                }
            }
            let (sel, ret) = page_selection(plan, l, i, || {
                let (qm, km) = (tape.value(qb), tape.value(kb));
                let keys: Vec<&[f64]> = (0..i).map(|j| km.row(j)).collect();
                score_pages(qm.row(i), &keys, cfg.n_heads)
            })?;
            layer_sel.push(sel);
            layer_ret.extend(ret);
        }
        let mut allowed = Vec::with_capacity(seq.len());
        for (i, span) in seq.page_spans.iter().enumerate() {
            let visible: Vec<usize> =
                layer_sel[i].iter().flat_map(|&j| seq.page_spans[j].clone()).collect();
            for p in span.clone() {
                let mut keys = visible.clone();
                keys.extend(span.start..=p);
                allowed.push(keys);
            }
        }
        out.selections.push(layer_sel);
        out.retrievals.push(layer_ret);

        let qr = tape.rope(q, &positions, cfg.n_heads, cfg.rope_base);
        let kr = tape.rope(k, &positions, cfg.n_heads, cfg.rope_base);
        let att = tape.sparse_attention(qr, kr, v, cfg.n_heads, scale, Rc::from(allowed));
        let o = tape.matmul(att, id("wo"));
        x = tape.add(x, o);
        let h2 = tape.rms_norm(x, id("ffn_norm"));
        let up = tape.matmul(h2, id("w_up"));
        let act = tape.gelu(up);
        let down = tape.matmul(act, id("w_down"));
        x = tape.add(x, down);
    }
    out.hidden.push(x);
    let xn = tape.gather_rows(x, &normal);
    let hn = tape.rms_norm(xn, vars.get(model.params.final_norm()));
    out.logits = tape.matmul(hn, vars.get(model.params.unembed()));
    if !tape.value(out.logits).is_finite() {
        return Err(Error::Numerical("non-finite logits".into()));
    }
    Ok(out)
}

/// Per-layer internals exposed for retrieval and inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerActivations {
    /// Layer input, one row per augmented position.
    pub hidden: Mat,
    /// Bookmark query/key/value rows (before rotation), one per page.
    pub q_bmk: Mat,
    pub k_bmk: Mat,
    pub v_bmk: Mat,
    /// Earlier pages visible to each page.
    pub selections: Vec<Vec<usize>>,
    pub retrievals: Vec<RetrievalSelection>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// One row per normal position, in order; bookmarks have no logits.
    pub logits: Mat,
    /// Augmented position of every logit row.
    pub normal_positions: Vec<usize>,
    pub kinds: Vec<PositionKind>,
    pub layers: Vec<LayerActivations>,
    /// Residual stream after the last layer.
    pub final_hidden: Mat,
}

impl ForwardOutput {
    /// Logit row for an augmented position, `None` at bookmarks.
    pub fn logits_at(&self, position: usize) -> Option<&[f64]> {
        self.normal_positions.binary_search(&position).ok().map(|r| self.logits.row(r))
    }
}

/// Inference-only forward pass.
pub fn forward(model: &Model, seq: &AugmentedSequence, plan: &SelectionPlan) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, &model.params, Some(&FreezeMask { trainable: Vec::new() }));
    let f = forward_tape(&mut tape, model, &vars, seq, plan)?;
    let layers = (0..model.config.n_layers)
        .map(|l| LayerActivations {
            hidden: tape.value(f.hidden[l]).clone(),
            q_bmk: tape.value(f.q_bmk[l]).clone(),
            k_bmk: tape.value(f.k_bmk[l]).clone(),
            v_bmk: tape.value(f.v_bmk[l]).clone(),
            selections: f.selections[l].clone(),
            retrievals: f.retrievals[l].clone(),
        })
        .collect();
    Ok(ForwardOutput {
        logits: tape.value(f.logits).clone(),
        normal_positions: seq.normal_positions(),
        kinds: seq.kinds.clone(),
        layers,
        final_hidden: tape.value(*f.hidden.last().expect("final state")).clone(),
    })
}

/// Next-token targets over normal positions only: logit row `r` predicts the
/// token at normal position `r + 1`, so bookmarks are skipped in both roles.
pub fn lm_targets(seq: &AugmentedSequence) -> (Vec<usize>, Vec<usize>) {
    let normal = seq.normal_positions();
    let rows = (0..normal.len().saturating_sub(1)).collect();
    let targets = normal.iter().skip(1).map(|&p| seq.tokens[p] as usize).collect();
    (rows, targets)
}

/// Mean next-token negative log-likelihood over normal positions.
pub fn lm_loss(output: &ForwardOutput, seq: &AugmentedSequence) -> Result<f64> {
    let (rows, targets) = lm_targets(seq);
    if rows.is_empty() {
        return Err(Error::InvalidInput("need at least two normal tokens for a language-model loss".into()));
    }
    let mut total = 0.0;
    for (&r, &t) in rows.iter().zip(&targets) {
        let row = output.logits.row(r);
        total += crate::tensor::log_sum_exp(row) - row[t];
    }
    Ok(total / rows.len() as f64)
}
