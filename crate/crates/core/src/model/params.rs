use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Embedding,
    BookmarkEmbedding,
    Norm,
    Projection,
    BookmarkProjection,
    Unembedding,
}

impl ParamKind {
    /// Decoupled weight decay skips normalization gains and embeddings.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Projection | ParamKind::BookmarkProjection | ParamKind::Unembedding)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub kind: ParamKind,
    pub value: Mat,
}

const LAYER_TENSORS: [&str; 11] = [
    "attn_norm", "wq", "wk", "wv", "wq_bmk", "wk_bmk", "wv_bmk", "wo", "ffn_norm", "w_up", "w_down",
];
const HEAD_TENSORS: usize = 2;

/// Borrowed view of one decoder layer.
pub struct LayerParams<'a> {
    pub attn_norm: &'a Mat,
    pub wq: &'a Mat,
    pub wk: &'a Mat,
    pub wv: &'a Mat,
    pub wq_bmk: &'a Mat,
    pub wk_bmk: &'a Mat,
    pub wv_bmk: &'a Mat,
    pub wo: &'a Mat,
    pub ffn_norm: &'a Mat,
    pub w_up: &'a Mat,
    pub w_down: &'a Mat,
}

/// All weights in a fixed order:
/// token embedding, bookmark embedding, 11 tensors per layer, final norm, unembedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub tensors: Vec<ParamTensor>,
}

impl ModelParams {
    pub const TOK_EMBEDDING: usize = 0;
    pub const BOOKMARK_EMBEDDING: usize = 1;

    pub fn layer_tensor(layer: usize, name: &str) -> usize {
        let off = LAYER_TENSORS.iter().position(|n| *n == name).expect("known layer tensor");
        HEAD_TENSORS + layer * LAYER_TENSORS.len() + off
    }

    pub fn final_norm(&self) -> usize {
        self.tensors.len() - 2
    }

    pub fn unembed(&self) -> usize {
        self.tensors.len() - 1
    }

    pub fn n_layers(&self) -> usize {
        (self.tensors.len() - HEAD_TENSORS - 2) / LAYER_TENSORS.len()
    }

    pub fn get(&self, id: usize) -> &Mat {
        &self.tensors[id].value
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Mat {
        &mut self.tensors[id].value
    }

    pub fn by_name(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn layer(&self, l: usize) -> LayerParams<'_> {
        let g = |n| self.get(Self::layer_tensor(l, n));
        LayerParams {
            attn_norm: g("attn_norm"),
            wq: g("wq"),
            wk: g("wk"),
            wv: g("wv"),
            wq_bmk: g("wq_bmk"),
            wk_bmk: g("wk_bmk"),
            wv_bmk: g("wv_bmk"),
            wo: g("wo"),
            ffn_norm: g("ffn_norm"),
            w_up: g("w_up"),
            w_down: g("w_down"),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.is_finite())
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.data.len()).sum()
    }

    /// Gaussian init from `config.seed`, rounded to `f32` so checkpoints are
    /// lossless. Bookmark projections start as exact copies of the normal
    /// ones; the bookmark embedding starts at the mean token embedding.
    pub fn init(config: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut gauss = |rows: usize, cols: usize, std: f64| {
            let data = (0..rows * cols)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * std) as f32 as f64
                })
                .collect();
            Mat { rows, cols, data }
        };
        let (v, d, ff) = (config.vocab_size, config.d_model, config.d_ff);
        let mut tensors = Vec::new();
        let mut push = |name: String, kind, value| tensors.push(ParamTensor { name, kind, value });

        let tok = gauss(v - 1, d, 1.0);
        let mut mean = vec![0.0; d];
        for r in 0..tok.rows {
            for (m, x) in mean.iter_mut().zip(tok.row(r)) {
                *m += x / tok.rows as f64;
            }
        }
        let mean = mean.into_iter().map(|m| m as f32 as f64).collect();
        push("tok_embedding".into(), ParamKind::Embedding, tok);
        push("bookmark_embedding".into(), ParamKind::BookmarkEmbedding, Mat::row_vector(mean));

        let proj_std = 1.0 / (d as f64).sqrt();
        let resid_std = proj_std / (2.0 * config.n_layers as f64).sqrt();
        for l in 0..config.n_layers {
            let ones = || Mat::row_vector(vec![1.0; d]);
            let wq = gauss(d, d, proj_std);
            let wk = gauss(d, d, proj_std);
            let wv = gauss(d, d, proj_std);
            let wo = gauss(d, d, resid_std);
            let w_up = gauss(d, ff, proj_std);
            let w_down = gauss(ff, d, resid_std / (ff as f64 / d as f64).sqrt());
            let name = |n: &str| format!("layers.{l}.{n}");
            push(name("attn_norm"), ParamKind::Norm, ones());
            push(name("wq"), ParamKind::Projection, wq.clone());
            push(name("wk"), ParamKind::Projection, wk.clone());
            push(name("wv"), ParamKind::Projection, wv.clone());
            push(name("wq_bmk"), ParamKind::BookmarkProjection, wq);
            push(name("wk_bmk"), ParamKind::BookmarkProjection, wk);
            push(name("wv_bmk"), ParamKind::BookmarkProjection, wv);
            push(name("wo"), ParamKind::Projection, wo);
            push(name("ffn_norm"), ParamKind::Norm, ones());
            push(name("w_up"), ParamKind::Projection, w_up);
            push(name("w_down"), ParamKind::Projection, w_down);
        }
        push("final_norm".into(), ParamKind::Norm, Mat::row_vector(vec![1.0; d]));
        push("unembed".into(), ParamKind::Unembedding, gauss(d, v, proj_std));
        Self { tensors }
    }
}

/// Per-tensor trainable flags.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub trainable: Vec<bool>,
}

impl FreezeMask {
    pub fn all_trainable(params: &ModelParams) -> Self {
        Self { trainable: vec![true; params.tensors.len()] }
    }

    /// Only the bookmark projections and the bookmark embedding train.
    pub fn stage1(params: &ModelParams) -> Self {
        Self {
            trainable: params
                .tensors
                .iter()
                .map(|t| matches!(t.kind, ParamKind::BookmarkProjection | ParamKind::BookmarkEmbedding))
                .collect(),
        }
    }

    pub fn is_trainable(&self, id: usize) -> bool {
        self.trainable.get(id).copied().unwrap_or(false)
    }

    pub fn trainable_names<'a>(&self, params: &'a ModelParams) -> Vec<&'a str> {
        params
            .tensors
            .iter()
            .zip(&self.trainable)
            .filter(|(_, t)| **t)
            .map(|(p, _)| p.name.as_str())
            .collect()
    }
}
