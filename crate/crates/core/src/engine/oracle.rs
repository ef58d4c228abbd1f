use super::{Engine, EngineConfig, EngineMode};
use crate::autodiff::rope_row;
use crate::error::Result;
use crate::model::{embed_rows, ffn_residual, final_logits, project_qkv, Model};
use crate::paging::AugmentedSequence;
use crate::tensor::{dot, softmax_in_place, Mat};

/// Dense causal attention over the whole augmented sequence in `f64`.
/// Returns logits at normal positions.
pub fn full_attention_oracle(model: &Model, seq: &AugmentedSequence) -> Result<Mat> {
    let cfg = &model.config;
    let (n, d, heads, hd) = (seq.len(), cfg.d_model, cfg.n_heads, cfg.head_dim());
    let mut x = embed_rows(model, &seq.tokens, &seq.kinds)?;
    let scale = 1.0 / (hd as f64).sqrt();
    for l in 0..cfg.n_layers {
        let mut qkv = project_qkv(model, l, &x, &seq.kinds)?;
        for p in 0..n {
            rope_row(qkv.q.row_mut(p), p, heads, cfg.rope_base, false);
            rope_row(qkv.k.row_mut(p), p, heads, cfg.rope_base, false);
        }
        let mut att = Mat::zeros(n, d);
        let mut w = Vec::with_capacity(n);
        for i in 0..n {
            for h in 0..heads {
                let span = h * hd..(h + 1) * hd;
                let qi = &qkv.q.row(i)[span.clone()];
                w.clear();
                w.extend((0..=i).map(|j| dot(qi, &qkv.k.row(j)[span.clone()]) * scale));
                softmax_in_place(&mut w);
                for (j, &p) in w.iter().enumerate() {
                    let vj = &qkv.v.row(j)[span.clone()];
                    for (o, &v) in att.row_mut(i)[span.clone()].iter_mut().zip(vj) {
                        *o += p * v;
                    }
                }
            }
        }
        x.add_assign(&att.matmul(model.layer(l).wo));
        ffn_residual(model, l, &mut x);
    }
    Ok(final_logits(model, &x.gather_rows(&seq.normal_positions())))
}

/// Streaming prefill where each page sees the first `sink_count` pages and
/// the `window_pages` most recent ones. Returns logits at normal positions.
pub fn sliding_window_baseline(
    model: &Model,
    seq: &AugmentedSequence,
    sink_count: usize,
    window_pages: usize,
) -> Result<Mat> {
    let cfg = EngineConfig { mode: EngineMode::SlidingWindow, sink_count, window_pages, ..Default::default() };
    Engine::new(model, cfg)?.prefill(seq)
}
