//! Reverse-mode differentiation over `f64` matrices.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! walks it in reverse and returns gradients for the leaves that were
//! registered as parameters. The op set is exactly what the decoder needs:
//! projections, RMS normalization, rotary encoding, sparse masked attention,
//! GELU and cross-entropy.

use std::rc::Rc;

use crate::tensor::{dot, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    GatherRows(Var, Rc<[usize]>),
    Interleave { a: Var, a_rows: Rc<[usize]>, b: Var, b_rows: Rc<[usize]> },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Rope { x: Var, positions: Rc<[usize]>, n_heads: usize, base: f64 },
    Gelu(Var),
    Attention(Box<AttentionRecord>),
    CrossEntropy { logits: Var, targets: Rc<[usize]>, probs: Mat },
    WeightedSum(Vec<(Var, f64)>),
}

struct AttentionRecord {
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    scale: f64,
    allowed: Rc<[Vec<usize>]>,
    /// probs[i][h * allowed[i].len() + j]
    probs: Vec<Vec<f64>>,
}

struct Node {
    value: Mat,
    op: Op,
    param: Option<usize>,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub const RMS_EPS: f64 = 1e-6;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Differentiable leaf whose gradient is reported under `id`.
    pub fn param(&mut self, id: usize, value: Mat) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_bt(self.value(b));
        self.push(out, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let out = self.value(a).gather_rows(rows);
        self.push(out, Op::GatherRows(a, rows.into()))
    }

    /// Scatter the rows of `a` and `b` into a fresh matrix of
    /// `a_rows.len() + b_rows.len()` rows.
    pub fn interleave(&mut self, a: Var, a_rows: &[usize], b: Var, b_rows: &[usize]) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        let cols = am.cols.max(bm.cols);
        let mut out = Mat::zeros(a_rows.len() + b_rows.len(), cols);
        for (i, &r) in a_rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(am.row(i));
        }
        for (i, &r) in b_rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(bm.row(i));
        }
        self.push(out, Op::Interleave { a, a_rows: a_rows.into(), b, b_rows: b_rows.into() })
    }

    /// Row-wise RMS normalization with a learned `1 x d` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Var {
        let xm = self.value(x);
        let g = &self.value(gain).data;
        let mut out = Mat::zeros(xm.rows, xm.cols);
        let mut inv_rms = Vec::with_capacity(xm.rows);
        for r in 0..xm.rows {
            let row = xm.row(r);
            let inv = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / xm.cols as f64 + RMS_EPS).sqrt();
            inv_rms.push(inv);
            for ((o, &v), &gv) in out.row_mut(r).iter_mut().zip(row).zip(g) {
                *o = v * inv * gv;
            }
        }
        self.push(out, Op::RmsNorm { x, gain, inv_rms })
    }

    pub fn rope(&mut self, x: Var, positions: &[usize], n_heads: usize, base: f64) -> Var {
        let mut out = self.value(x).clone();
        for (r, &p) in positions.iter().enumerate() {
            rope_row(out.row_mut(r), p, n_heads, base, false);
        }
        self.push(out, Op::Rope { x, positions: positions.into(), n_heads, base })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v = gelu(*v);
        }
        self.push(out, Op::Gelu(x))
    }

    /// Multi-head attention where query row `i` may only see key rows
    /// `allowed[i]`. Logits are scaled by `scale` before the softmax.
    pub fn sparse_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        scale: f64,
        allowed: Rc<[Vec<usize>]>,
    ) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let hd = qm.cols / n_heads;
        let mut out = Mat::zeros(qm.rows, vm.cols);
        let mut probs = Vec::with_capacity(qm.rows);
        for (i, keys) in allowed.iter().enumerate() {
            let mut p_all = vec![0.0; n_heads * keys.len()];
            for h in 0..n_heads {
                let span = h * hd..(h + 1) * hd;
                let qi = &qm.row(i)[span.clone()];
                let p = &mut p_all[h * keys.len()..(h + 1) * keys.len()];
                for (pj, &j) in p.iter_mut().zip(keys.iter()) {
                    *pj = dot(qi, &km.row(j)[span.clone()]) * scale;
                }
                crate::tensor::softmax_in_place(p);
                let o = &mut out.row_mut(i)[span.clone()];
                for (&pj, &j) in p.iter().zip(keys.iter()) {
                    for (ov, &vv) in o.iter_mut().zip(&vm.row(j)[span.clone()]) {
                        *ov += pj * vv;
                    }
                }
            }
            probs.push(p_all);
        }
        self.push(
            out,
            Op::Attention(Box::new(AttentionRecord { q, k, v, n_heads, scale, allowed, probs })),
        )
    }

    /// Mean negative log-likelihood of `targets[i]` under softmax of row `i`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.rows, targets.len(), "one target per logit row");
        let mut probs = lm.clone();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = probs.row_mut(r);
            loss += crate::tensor::log_sum_exp(row) - row[t];
            crate::tensor::softmax_in_place(row);
        }
        let n = targets.len().max(1) as f64;
        self.push(
            Mat::row_vector(vec![loss / n]),
            Op::CrossEntropy { logits, targets: targets.into(), probs },
        )
    }

    /// `Σ w_i · s_i` over `1 x 1` inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|&(v, w)| self.scalar(v) * w).sum();
        self.push(Mat::row_vector(vec![total]), Op::WeightedSum(terms.to_vec()))
    }

    /// Gradients of the `1 x 1` node `loss` with respect to every registered
    /// parameter leaf, keyed by parameter id. Leaves sharing an id are summed.
    pub fn backward(&self, loss: Var) -> Vec<(usize, Mat)> {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::row_vector(vec![1.0]));
        let mut out: Vec<(usize, Mat)> = Vec::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(id) = node.param {
                match out.iter_mut().find(|(pid, _)| *pid == id) {
                    Some((_, acc)) => acc.add_assign(&g),
                    None => out.push((id, g.clone())),
                }
            }
            self.propagate(&node.op, g, &mut grads);
        }
        out
    }

    fn propagate(&self, op: &Op, g: Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, d: Mat| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&d),
            slot @ None => *slot = Some(d),
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                acc(*a, g.matmul_bt(bm));
                acc(*b, am.matmul_at(&g));
            }
            Op::MatMulBt(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                acc(*a, g.matmul(bm));
                acc(*b, g.matmul_at(am));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::Scale(a, s) => {
                let mut d = g;
                d.scale(*s);
                acc(*a, d);
            }
            Op::GatherRows(a, rows) => {
                let am = self.value(*a);
                let mut d = Mat::zeros(am.rows, am.cols);
                for (i, &r) in rows.iter().enumerate() {
                    for (dv, &gv) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                        *dv += gv;
                    }
                }
                acc(*a, d);
            }
            Op::Interleave { a, a_rows, b, b_rows } => {
                acc(*a, g.gather_rows(a_rows));
                acc(*b, g.gather_rows(b_rows));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xm = self.value(*x);
                let gm = &self.value(*gain).data;
                let d = xm.cols as f64;
                let mut dx = Mat::zeros(xm.rows, xm.cols);
                let mut dg = Mat::zeros(1, xm.cols);
                for r in 0..xm.rows {
                    let (xr, gr, inv) = (xm.row(r), g.row(r), inv_rms[r]);
                    // y = x * inv * gain; inv = (mean(x^2) + eps)^-1/2
                    let mut s = 0.0;
                    for c in 0..xm.cols {
                        dg.data[c] += gr[c] * xr[c] * inv;
                        s += gr[c] * gm[c] * xr[c];
                    }
                    let coef = s * inv * inv * inv / d;
                    for (c, dv) in dx.row_mut(r).iter_mut().enumerate() {
                        *dv = gr[c] * gm[c] * inv - xr[c] * coef;
                    }
                }
                acc(*x, dx);
                acc(*gain, dg);
            }
            Op::Rope { x, positions, n_heads, base } => {
                let mut d = g;
                for (r, &p) in positions.iter().enumerate() {
                    rope_row(d.row_mut(r), p, *n_heads, *base, true);
                }
                acc(*x, d);
            }
            Op::Gelu(x) => {
                let xm = self.value(*x);
                let mut d = g;
                for (dv, &xv) in d.data.iter_mut().zip(&xm.data) {
                    *dv *= gelu_grad(xv);
                }
                acc(*x, d);
            }
            Op::Attention(rec) => {
                let (dq, dk, dv) = self.attention_backward(rec, &g);
                acc(rec.q, dq);
                acc(rec.k, dk);
                acc(rec.v, dv);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = targets.len().max(1) as f64;
                let scale = g.data[0] / n;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d.row_mut(r)[t] -= 1.0;
                }
                d.scale(scale);
                acc(*logits, d);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    acc(v, Mat::row_vector(vec![g.data[0] * w]));
                }
            }
        }
    }

    fn attention_backward(&self, rec: &AttentionRecord, g: &Mat) -> (Mat, Mat, Mat) {
        let (qm, km, vm) = (self.value(rec.q), self.value(rec.k), self.value(rec.v));
        let hd = qm.cols / rec.n_heads;
        let mut dq = Mat::zeros(qm.rows, qm.cols);
        let mut dk = Mat::zeros(km.rows, km.cols);
        let mut dv = Mat::zeros(vm.rows, vm.cols);
        let mut ds = Vec::new();
        for (i, keys) in rec.allowed.iter().enumerate() {
            for h in 0..rec.n_heads {
                let span = h * hd..(h + 1) * hd;
                let p = &rec.probs[i][h * keys.len()..(h + 1) * keys.len()];
                let go = &g.row(i)[span.clone()];
                ds.clear();
                let mut weighted = 0.0;
                for (&pj, &j) in p.iter().zip(keys.iter()) {
                    let dp = dot(go, &vm.row(j)[span.clone()]);
                    ds.push(dp);
                    weighted += pj * dp;
                    for (d, &gv) in dv.row_mut(j)[span.clone()].iter_mut().zip(go) {
                        *d += pj * gv;
                    }
                }
                let qi: Vec<f64> = qm.row(i)[span.clone()].to_vec();
                for ((&pj, &j), dsj) in p.iter().zip(keys.iter()).zip(ds.iter_mut()) {
                    let s = pj * (*dsj - weighted) * rec.scale;
                    if s == 0.0 {
                        continue;
                    }
                    let kj = &km.row(j)[span.clone()];
                    for (d, &kv) in dq.row_mut(i)[span.clone()].iter_mut().zip(kj) {
                        *d += s * kv;
                    }
                    for (d, &qv) in dk.row_mut(j)[span.clone()].iter_mut().zip(&qi) {
                        *d += s * qv;
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

/// Rotate consecutive pairs of every head by `position * base^(-2i/head_dim)`.
/// `inverse` applies the transpose rotation.
pub fn rope_row(row: &mut [f64], position: usize, n_heads: usize, base: f64, inverse: bool) {
    let hd = row.len() / n_heads;
    let half = hd / 2;
    for i in 0..half {
        let theta = position as f64 * base.powf(-2.0 * i as f64 / hd as f64);
        let (s, c) = theta.sin_cos();
        let s = if inverse { -s } else { s };
        for h in 0..n_heads {
            let a = h * hd + 2 * i;
            let (x0, x1) = (row[a], row[a + 1]);
            row[a] = x0 * c - x1 * s;
            row[a + 1] = x0 * s + x1 * c;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(&Mat) -> f64, x: &Mat) -> Mat {
        let eps = 1e-6;
        let mut g = Mat::zeros(x.rows, x.cols);
        for i in 0..x.data.len() {
            let mut p = x.clone();
            p.data[i] += eps;
            let mut m = x.clone();
            m.data[i] -= eps;
            g.data[i] = (f(&p) - f(&m)) / (2.0 * eps);
        }
        g
    }

    fn sample(rows: usize, cols: usize, seed: f64) -> Mat {
        let data = (0..rows * cols).map(|i| ((i as f64 + seed) * 1.37).sin()).collect();
        Mat::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn rope_inverse_undoes_rotation() {
        let mut row: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let orig = row.clone();
        rope_row(&mut row, 37, 2, 10_000.0, false);
        assert!(row.iter().zip(&orig).any(|(a, b)| (a - b).abs() > 1e-3));
        rope_row(&mut row, 37, 2, 10_000.0, true);
        for (a, b) in row.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        // loss = CE(gelu(rms(x) W) attention ..., targets)
        let x0 = sample(5, 4, 0.3);
        let w0 = sample(4, 4, 1.1);
        let gain0 = sample(1, 4, 2.0);
        let allowed: Rc<[Vec<usize>]> =
            (0..5).map(|i| (0..=i).collect::<Vec<_>>()).collect::<Vec<_>>().into();
        let run = |x: &Mat, w: &Mat, gain: &Mat| -> (f64, Vec<(usize, Mat)>) {
            let mut t = Tape::new();
            let xv = t.param(0, x.clone());
            let wv = t.param(1, w.clone());
            let gv = t.param(2, gain.clone());
            let h = t.rms_norm(xv, gv);
            let q = t.matmul(h, wv);
            let qr = t.rope(q, &[0, 1, 2, 5, 9], 2, 100.0);
            let a = t.sparse_attention(qr, qr, h, 2, 0.5, allowed.clone());
            let a = t.gelu(a);
            let s = t.add(a, xv);
            let sel = t.gather_rows(s, &[1, 3, 4]);
            let other = t.gather_rows(h, &[0, 2]);
            let mixed = t.interleave(sel, &[0, 2, 4], other, &[1, 3]);
            let logits = t.matmul_bt(mixed, wv);
            let ce = t.cross_entropy(logits, &[0, 1, 2, 3, 1]);
            let half = t.scale(ce, 0.5);
            let loss = t.weighted_sum(&[(ce, 1.0), (half, 2.0)]);
            let l = t.scalar(loss);
            (l, t.backward(loss))
        };
        let (_, grads) = run(&x0, &w0, &gain0);
        let by_id = |id: usize| grads.iter().find(|(p, _)| *p == id).unwrap().1.clone();
        let nx = numeric_grad(|x| run(x, &w0, &gain0).0, &x0);
        let nw = numeric_grad(|w| run(&x0, w, &gain0).0, &w0);
        let ng = numeric_grad(|g| run(&x0, &w0, g).0, &gain0);
        for (analytic, numeric) in [(by_id(0), nx), (by_id(1), nw), (by_id(2), ng)] {
            assert!(analytic.max_abs_diff(&numeric) < 1e-7, "{analytic:?} vs {numeric:?}");
        }
    }
}
