//! Plain (non-recording) layer kernels used by the streaming engine and the
//! dense reference.

use super::params::ModelParams;
use super::Model;
use crate::autodiff::{gelu, rope_row, RMS_EPS};
use crate::error::{Error, Result};
use crate::paging::{PageKv, PositionKind, TokenId};
use crate::tensor::{dot, softmax_in_place, vec_mat, Mat};

/// Query/key/value rows before rotary encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Qkv {
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
}

/// Token embeddings; bookmark positions use the dedicated bookmark row.
pub fn embed_rows(model: &Model, tokens: &[TokenId], kinds: &[PositionKind]) -> Result<Mat> {
    let emb = model.params.get(ModelParams::TOK_EMBEDDING);
    let bmk = model.params.get(ModelParams::BOOKMARK_EMBEDDING);
    let mut out = Mat::zeros(tokens.len(), model.config.d_model);
    for (r, (&t, kind)) in tokens.iter().zip(kinds).enumerate() {
        let src = match kind {
            PositionKind::Bookmark => bmk.row(0),
            PositionKind::Normal => {
                if t as usize >= emb.rows {
                    return Err(Error::InvalidInput(format!("token {t} is not a normal vocabulary id")));
                }
                emb.row(t as usize)
            }
        };
        out.row_mut(r).copy_from_slice(src);
    }
    Ok(out)
}

pub(crate) fn rms_norm_rows(x: &Mat, gain: &Mat) -> Mat {
    let mut out = x.clone();
    for r in 0..x.rows {
        let row = out.row_mut(r);
        let inv = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64 + RMS_EPS).sqrt();
        for (v, g) in row.iter_mut().zip(&gain.data) {
            *v *= inv * g;
        }
    }
    out
}

/// Normalize the layer input and project each row with the normal or the
/// bookmark matrices according to its kind.
pub fn project_qkv(model: &Model, layer: usize, x: &Mat, kinds: &[PositionKind]) -> Result<Qkv> {
    if x.cols != model.config.d_model || x.rows != kinds.len() {
        return Err(Error::Shape(format!(
            "layer input is {}x{}, expected {}x{}",
            x.rows,
            x.cols,
            kinds.len(),
            model.config.d_model
        )));
    }
    if !x.is_finite() {
        return Err(Error::Numerical(format!("non-finite layer input at layer {layer}")));
    }
    let p = model.layer(layer);
    let h = rms_norm_rows(x, p.attn_norm);
    let d = model.config.d_model;
    let mut qkv = Qkv { q: Mat::zeros(x.rows, d), k: Mat::zeros(x.rows, d), v: Mat::zeros(x.rows, d) };
    for (r, kind) in kinds.iter().enumerate() {
        let (wq, wk, wv) = match kind {
            PositionKind::Normal => (p.wq, p.wk, p.wv),
            PositionKind::Bookmark => (p.wq_bmk, p.wk_bmk, p.wv_bmk),
        };
        let hr = h.row(r);
        qkv.q.row_mut(r).copy_from_slice(&vec_mat(hr, wq));
        qkv.k.row_mut(r).copy_from_slice(&vec_mat(hr, wk));
        qkv.v.row_mut(r).copy_from_slice(&vec_mat(hr, wv));
    }
    Ok(qkv)
}

/// The current attention window: keys/values for every window row and
/// queries for the last `q.rows` of them. Nothing is rotated yet.
#[derive(Clone, Debug)]
pub struct WindowQkv {
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    pub positions: Vec<usize>,
}

/// Attention of the window queries over the selected pages (normal and
/// bookmark entries) plus the causal part of the window, followed by the
/// output projection.
pub fn attend_selected(
    model: &Model,
    layer: usize,
    window: &WindowQkv,
    selected: &[PageKv],
) -> Result<Mat> {
    let cfg = &model.config;
    let (d, n_heads, hd) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
    let nk = window.k.rows;
    let nq = window.q.rows;
    if nq == 0 || nk == 0 {
        return Err(Error::InvalidSelection("attention window is empty".into()));
    }
    if nq > nk || window.v.rows != nk || window.positions.len() != nk {
        return Err(Error::Shape("window queries/keys/positions disagree".into()));
    }
    let first = window.positions[0];
    let mut keys: Vec<Vec<f64>> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for kv in selected {
        if kv.bookmark_position() >= first {
            return Err(Error::InvalidSelection(format!(
                "page {} is not before the window",
                kv.page_index
            )));
        }
        if kv.normal_keys.cols != d {
            return Err(Error::Shape(format!("page {} has width {}", kv.page_index, kv.normal_keys.cols)));
        }
        let widen = |xs: &[f32]| xs.iter().map(|&x| x as f64).collect::<Vec<f64>>();
        for r in 0..kv.normal_keys.rows {
            let mut k = widen(kv.normal_keys.row(r));
            rope_row(&mut k, kv.start_position + r, n_heads, cfg.rope_base, false);
            keys.push(k);
            values.push(widen(kv.normal_values.row(r)));
        }
        let mut k = widen(&kv.bookmark_key);
        rope_row(&mut k, kv.bookmark_position(), n_heads, cfg.rope_base, false);
        keys.push(k);
        values.push(widen(&kv.bookmark_value));
    }
    let n_selected = keys.len();
    for r in 0..nk {
        let mut k = window.k.row(r).to_vec();
        rope_row(&mut k, window.positions[r], n_heads, cfg.rope_base, false);
        keys.push(k);
        values.push(window.v.row(r).to_vec());
    }

    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads_out = Mat::zeros(nq, d);
    let mut scores = Vec::with_capacity(keys.len());
    for i in 0..nq {
        let wrow = nk - nq + i;
        let mut q = window.q.row(i).to_vec();
        rope_row(&mut q, window.positions[wrow], n_heads, cfg.rope_base, false);
        let visible = n_selected + wrow + 1;
        for h in 0..n_heads {
            let span = h * hd..(h + 1) * hd;
            scores.clear();
            scores.extend(keys[..visible].iter().map(|k| dot(&q[span.clone()], &k[span.clone()]) * scale));
            softmax_in_place(&mut scores);
            let out = &mut heads_out.row_mut(i)[span.clone()];
            for (p, v) in scores.iter().zip(&values[..visible]) {
                for (o, &x) in out.iter_mut().zip(&v[span.clone()]) {
                    *o += p * x;
                }
            }
        }
    }
    Ok(heads_out.matmul(model.layer(layer).wo))
}

/// `x += W_down · gelu(W_up · norm(x))` row by row.
pub fn ffn_residual(model: &Model, layer: usize, x: &mut Mat) {
    let p = model.layer(layer);
    let h = rms_norm_rows(x, p.ffn_norm);
    for r in 0..x.rows {
        let mut up = vec_mat(h.row(r), p.w_up);
        for u in &mut up {
            *u = gelu(*u);
        }
        let down = vec_mat(&up, p.w_down);
        for (o, dlt) in x.row_mut(r).iter_mut().zip(down) {
            *o += dlt;
        }
    }
}

/// Final normalization and unembedding.
pub fn final_logits(model: &Model, x: &Mat) -> Mat {
    let h = rms_norm_rows(x, model.params.get(model.params.final_norm()));
    h.matmul(model.params.get(model.params.unembed()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::paging::KvMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn micro() -> Model {
        Model::init(ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            page_size: 4,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_init_makes_bookmark_path_match_normal_path() {
        let m = micro();
        let x = random_mat(3, 8, 1);
        let normal = project_qkv(&m, 1, &x, &[PositionKind::Normal; 3]).unwrap();
        let bmk = project_qkv(&m, 1, &x, &[PositionKind::Bookmark; 3]).unwrap();
        assert_eq!(normal, bmk);
    }

    #[test]
    fn zero_input_projects_to_zero() {
        let m = micro();
        let qkv = project_qkv(&m, 0, &Mat::zeros(2, 8), &[PositionKind::Normal, PositionKind::Bookmark]).unwrap();
        for mat in [&qkv.q, &qkv.k, &qkv.v] {
            assert!(mat.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn projection_matches_dense_oracle() {
        let m = micro();
        let x = random_mat(3, 8, 9);
        let kinds = [PositionKind::Normal, PositionKind::Bookmark, PositionKind::Normal];
        let mut m2 = m.clone();
        // make the bookmark path differ so the split is observable
        for v in &mut m2.params.get_mut(ModelParams::layer_tensor(0, "wk_bmk")).data {
            *v *= -0.5;
        }
        let got = project_qkv(&m2, 0, &x, &kinds).unwrap();
        let p = m2.layer(0);
        for r in 0..3 {
            let ms: f64 = x.row(r).iter().map(|v| v * v).sum::<f64>() / 8.0;
            let h: Vec<f64> = x.row(r).iter().map(|v| v / (ms + 1e-6).sqrt()).collect();
            let wk = if r == 1 { p.wk_bmk } else { p.wk };
            for c in 0..8 {
                let want: f64 = (0..8).map(|i| h[i] * wk.get(i, c)).sum();
                assert!((got.k.get(r, c) - want).abs() < 1e-12);
            }
            assert_eq!(got.k.row(r).len() / m2.config.n_heads, 4);
        }
    }

    #[test]
    fn nan_input_is_numerical_error() {
        let m = micro();
        let mut x = Mat::zeros(1, 8);
        x.data[3] = f64::NAN;
        assert!(matches!(project_qkv(&m, 0, &x, &[PositionKind::Normal]), Err(Error::Numerical(_))));
    }

    #[test]
    fn singleton_attention_returns_own_value() {
        let m = micro();
        let v = random_mat(1, 8, 4);
        let w = WindowQkv { q: random_mat(1, 8, 5), k: random_mat(1, 8, 6), v: v.clone(), positions: vec![0] };
        let got = attend_selected(&m, 0, &w, &[]).unwrap();
        let want = v.matmul(m.layer(0).wo);
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn identical_keys_split_attention_evenly() {
        let mut m = micro();
        let id = ModelParams::layer_tensor(0, "wo");
        let eye: Vec<f64> = (0..64).map(|i| if i % 9 == 0 { 1.0 } else { 0.0 }).collect();
        *m.params.get_mut(id) = Mat::from_vec(8, 8, eye).unwrap();
        // the selected page holds a single token whose key is zero, as is the
        // window key, so both entries get weight 0.5 regardless of position
        let kv = PageKv {
            layer: 0,
            page_index: 0,
            start_position: 0,
            normal_keys: KvMatrix::new(1, 8, vec![0.0; 8]).unwrap(),
            normal_values: KvMatrix::new(1, 8, vec![2.0; 8]).unwrap(),
            bookmark_key: vec![0.0; 8],
            bookmark_value: vec![4.0; 8],
        };
        let w = WindowQkv {
            q: random_mat(1, 8, 1),
            k: Mat::zeros(1, 8),
            v: Mat::from_vec(1, 8, vec![6.0; 8]).unwrap(),
            positions: vec![2],
        };
        let got = attend_selected(&m, 0, &w, &[kv]).unwrap();
        // three equal keys -> uniform weights 1/3
        assert!(got.data.iter().all(|&x| (x - 4.0).abs() < 1e-12));
        let w2 = WindowQkv {
            q: random_mat(2, 8, 1),
            k: Mat::zeros(2, 8),
            v: Mat::from_vec(2, 8, [vec![1.0; 8], vec![3.0; 8]].concat()).unwrap(),
            positions: vec![0, 1],
        };
        let got = attend_selected(&m, 0, &w2, &[]).unwrap();
        assert!(got.row(1).iter().all(|&x| (x - 2.0).abs() < 1e-12));
    }

    #[test]
    fn empty_window_is_rejected() {
        let m = micro();
        let w = WindowQkv { q: Mat::zeros(0, 8), k: Mat::zeros(0, 8), v: Mat::zeros(0, 8), positions: vec![] };
        assert!(matches!(attend_selected(&m, 0, &w, &[]), Err(Error::InvalidSelection(_))));
    }
}
