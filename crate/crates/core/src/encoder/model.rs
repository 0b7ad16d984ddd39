//! Pre-norm transformer forward pass with a cached tape, and its exact
//! reverse pass.
//!
//! Per layer, with `x` the residual stream of shape `[L, d]`:
//!
//! ```text
//! a  = LN1(x)
//! x1 = x + Attn(a)            Attn = softmax(q kᵀ / √dh, PAD keys masked) v, then Wo
//! c  = LN2(x1)
//! x2 = x1 + GELU(c W1 + b1) W2 + b2
//! ```
//!
//! The embedding is the mean of the final residual stream over non-PAD
//! positions.

use super::params::{EncoderConfig, Parameters, PER_LAYER};
use crate::tokenizer::PAD_ID;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Borrowed view of the parameter tensors in layout order.
pub(crate) struct Weights<'a> {
    pub cfg: EncoderConfig,
    pub t: Vec<&'a [f64]>,
}

impl<'a> Weights<'a> {
    pub fn new(params: &'a Parameters) -> Self {
        Self {
            cfg: *params.config(),
            t: params.tensors().iter().map(|t| t.data.as_slice()).collect(),
        }
    }

    fn layer(&self, l: usize) -> &[&'a [f64]] {
        let base = 2 + l * PER_LAYER;
        &self.t[base..base + PER_LAYER]
    }
}

// Per-layer tensor offsets, matching EncoderConfig::layout.
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const BQ: usize = 3;
const WK: usize = 4;
const BK: usize = 5;
const WV: usize = 6;
const BV: usize = 7;
const WO: usize = 8;
const BO: usize = 9;
const LN2_G: usize = 10;
const LN2_B: usize = 11;
const W1: usize = 12;
const B1: usize = 13;
const W2: usize = 14;
const B2: usize = 15;

/// out[m×n] = a[m×k] · w[k×n] + bias[n]
fn affine(a: &[f64], w: &[f64], bias: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        out.extend_from_slice(bias);
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &x) in a[i * k..(i + 1) * k].iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, &wv) in row.iter_mut().zip(&w[p * n..(p + 1) * n]) {
                *o += x * wv;
            }
        }
    }
    out
}

/// dw[k×n] += aᵀ · g, db[n] += column sums of g; returns g · wᵀ added into `da`.
#[allow(clippy::too_many_arguments)]
fn affine_backward(
    a: &[f64],
    w: &[f64],
    g: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    da: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (b, &gv) in db.iter_mut().zip(grow) {
            *b += gv;
        }
        let arow = &a[i * k..(i + 1) * k];
        let darow = &mut da[i * k..(i + 1) * k];
        for p in 0..k {
            let wrow = &w[p * n..(p + 1) * n];
            let x = arow[p];
            let dwrow = &mut dw[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                dwrow[j] += x * grow[j];
                acc += grow[j] * wrow[j];
            }
            darow[p] += acc;
        }
    }
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], rows: usize, d: usize) -> (Vec<f64>, LnCache) {
    let mut y = vec![0.0; rows * d];
    let mut xhat = vec![0.0; rows * d];
    let mut rstd = vec![0.0; rows];
    for i in 0..rows {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for c in 0..d {
            let h = (row[c] - mean) * r;
            xhat[i * d + c] = h;
            y[i * d + c] = gamma[c] * h + beta[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    dy: &[f64],
    cache: &LnCache,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    dx: &mut [f64],
    rows: usize,
    d: usize,
) {
    let mut dxhat = vec![0.0; d];
    for i in 0..rows {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..d {
            dgamma[c] += dyr[c] * xh[c];
            dbeta[c] += dyr[c];
            dxhat[c] = dyr[c] * gamma[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xh[c];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let r = cache.rstd[i];
        for c in 0..d {
            dx[i * d + c] += r * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct LayerCache {
    ln1: LnCache,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `[heads, L, L]`, zero on masked keys.
    probs: Vec<f64>,
    ctx: Vec<f64>,
    ln2: LnCache,
    c: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

/// Everything the reverse pass needs for one sequence.
pub(crate) struct SeqCache {
    ids: Vec<u32>,
    valid: Vec<bool>,
    n_valid: usize,
    layers: Vec<LayerCache>,
}

fn layer_forward(w: &[&[f64]], cfg: &EncoderConfig, x: &mut [f64], valid: &[bool]) -> LayerCache {
    let (l, d, ff, h, dh) = (
        valid.len(),
        cfg.embed_dim,
        cfg.feedforward_dim,
        cfg.num_heads,
        cfg.head_dim(),
    );
    let scale = 1.0 / (dh as f64).sqrt();

    let (a, ln1) = layer_norm(x, w[LN1_G], w[LN1_B], l, d);
    let q = affine(&a, w[WQ], w[BQ], l, d, d);
    let k = affine(&a, w[WK], w[BK], l, d, d);
    let v = affine(&a, w[WV], w[BV], l, d, d);

    let mut probs = vec![0.0; h * l * l];
    let mut ctx = vec![0.0; l * d];
    for head in 0..h {
        let off = head * dh;
        for i in 0..l {
            let p = &mut probs[(head * l + i) * l..(head * l + i + 1) * l];
            let qi = &q[i * d + off..i * d + off + dh];
            let mut max = f64::NEG_INFINITY;
            for j in 0..l {
                if valid[j] {
                    let kj = &k[j * d + off..j * d + off + dh];
                    let s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    p[j] = s;
                    max = max.max(s);
                }
            }
            let mut z = 0.0;
            for j in 0..l {
                if valid[j] {
                    p[j] = (p[j] - max).exp();
                    z += p[j];
                }
            }
            let ci = &mut ctx[i * d + off..i * d + off + dh];
            for j in 0..l {
                if valid[j] {
                    p[j] /= z;
                    let vj = &v[j * d + off..j * d + off + dh];
                    for (c, &vv) in ci.iter_mut().zip(vj) {
                        *c += p[j] * vv;
                    }
                }
            }
        }
    }

    let o = affine(&ctx, w[WO], w[BO], l, d, d);
    for (xv, ov) in x.iter_mut().zip(&o) {
        *xv += ov;
    }

    let (c, ln2) = layer_norm(x, w[LN2_G], w[LN2_B], l, d);
    let u = affine(&c, w[W1], w[B1], l, d, ff);
    let g: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
    let f = affine(&g, w[W2], w[B2], l, ff, d);
    for (xv, fv) in x.iter_mut().zip(&f) {
        *xv += fv;
    }

    LayerCache {
        ln1,
        a,
        q,
        k,
        v,
        probs,
        ctx,
        ln2,
        c,
        u,
        g,
    }
}

/// `dx` holds the gradient w.r.t. the layer output on entry and w.r.t. the
/// layer input on return.
fn layer_backward(
    w: &[&[f64]],
    cfg: &EncoderConfig,
    cache: &LayerCache,
    valid: &[bool],
    dx: &mut [f64],
    grads: &mut [&mut [f64]],
) {
    let (l, d, ff, h, dh) = (
        valid.len(),
        cfg.embed_dim,
        cfg.feedforward_dim,
        cfg.num_heads,
        cfg.head_dim(),
    );
    let scale = 1.0 / (dh as f64).sqrt();

    // feed-forward block: x2 = x1 + GELU(c W1 + b1) W2 + b2
    let mut dg = vec![0.0; l * ff];
    {
        let (lo, hi) = grads.split_at_mut(B2);
        affine_backward(&cache.g, w[W2], dx, lo[W2], hi[0], &mut dg, l, ff, d);
    }
    for (dgv, &uv) in dg.iter_mut().zip(&cache.u) {
        *dgv *= gelu_grad(uv);
    }
    let mut dc = vec![0.0; l * d];
    {
        let (lo, hi) = grads.split_at_mut(B1);
        affine_backward(&cache.c, w[W1], &dg, lo[W1], hi[0], &mut dc, l, d, ff);
    }
    {
        let (lo, hi) = grads.split_at_mut(LN2_B);
        layer_norm_backward(&dc, &cache.ln2, w[LN2_G], lo[LN2_G], hi[0], dx, l, d);
    }

    // attention block: x1 = x + Attn(LN1(x))
    let mut dctx = vec![0.0; l * d];
    {
        let (lo, hi) = grads.split_at_mut(BO);
        affine_backward(&cache.ctx, w[WO], dx, lo[WO], hi[0], &mut dctx, l, d, d);
    }
    let mut dq = vec![0.0; l * d];
    let mut dk = vec![0.0; l * d];
    let mut dv = vec![0.0; l * d];
    let mut dp = vec![0.0; l];
    for head in 0..h {
        let off = head * dh;
        for i in 0..l {
            let p = &cache.probs[(head * l + i) * l..(head * l + i + 1) * l];
            let dci = &dctx[i * d + off..i * d + off + dh];
            let mut dot = 0.0;
            for j in 0..l {
                if !valid[j] {
                    dp[j] = 0.0;
                    continue;
                }
                let vj = &cache.v[j * d + off..j * d + off + dh];
                dp[j] = dci.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                dot += p[j] * dp[j];
                let dvj = &mut dv[j * d + off..j * d + off + dh];
                for (dvv, &dcv) in dvj.iter_mut().zip(dci) {
                    *dvv += p[j] * dcv;
                }
            }
            let qi = &cache.q[i * d + off..i * d + off + dh];
            for j in 0..l {
                if !valid[j] {
                    continue;
                }
                let ds = p[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &cache.k[j * d + off..j * d + off + dh];
                let dqi = &mut dq[i * d + off..i * d + off + dh];
                for (dqv, &kv) in dqi.iter_mut().zip(kj) {
                    *dqv += ds * kv;
                }
                let dkj = &mut dk[j * d + off..j * d + off + dh];
                for (dkv, &qv) in dkj.iter_mut().zip(qi) {
                    *dkv += ds * qv;
                }
            }
        }
    }
    let mut da = vec![0.0; l * d];
    for (wi, bi, dy) in [(WQ, BQ, &dq), (WK, BK, &dk), (WV, BV, &dv)] {
        let (lo, hi) = grads.split_at_mut(bi);
        affine_backward(&cache.a, w[wi], dy, lo[wi], hi[0], &mut da, l, d, d);
    }
    let (lo, hi) = grads.split_at_mut(LN1_B);
    layer_norm_backward(&da, &cache.ln1, w[LN1_G], lo[LN1_G], hi[0], dx, l, d);
}

/// Mean-pooled embedding of one sequence. The caller guarantees the ids are
/// in range, the length is within `max_len` and at least one id is not PAD.
pub(crate) fn forward(w: &Weights, ids: &[u32]) -> (Vec<f64>, SeqCache) {
    let cfg = &w.cfg;
    let (l, d) = (ids.len(), cfg.embed_dim);
    let valid: Vec<bool> = ids.iter().map(|&id| id != PAD_ID).collect();
    let n_valid = valid.iter().filter(|&&v| v).count();

    let mut x = vec![0.0; l * d];
    for (i, &id) in ids.iter().enumerate() {
        let tok = &w.t[0][id as usize * d..(id as usize + 1) * d];
        let pos = &w.t[1][i * d..(i + 1) * d];
        for c in 0..d {
            x[i * d + c] = tok[c] + pos[c];
        }
    }
    let layers = (0..cfg.num_layers)
        .map(|layer| layer_forward(w.layer(layer), cfg, &mut x, &valid))
        .collect();

    let mut pooled = vec![0.0; d];
    for i in (0..l).filter(|&i| valid[i]) {
        for c in 0..d {
            pooled[c] += x[i * d + c];
        }
    }
    for v in &mut pooled {
        *v /= n_valid as f64;
    }
    (
        pooled,
        SeqCache {
            ids: ids.to_vec(),
            valid,
            n_valid,
            layers,
        },
    )
}

/// Accumulates d⟨upstream, embedding⟩/dθ into `grads` (one slice per tensor).
pub(crate) fn backward(w: &Weights, cache: &SeqCache, upstream: &[f64], grads: &mut [&mut [f64]]) {
    let cfg = &w.cfg;
    let (l, d) = (cache.ids.len(), cfg.embed_dim);
    let inv = 1.0 / cache.n_valid as f64;
    let mut dx = vec![0.0; l * d];
    for i in (0..l).filter(|&i| cache.valid[i]) {
        for c in 0..d {
            dx[i * d + c] = upstream[c] * inv;
        }
    }
    for layer in (0..cfg.num_layers).rev() {
        let base = 2 + layer * PER_LAYER;
        layer_backward(
            w.layer(layer),
            cfg,
            &cache.layers[layer],
            &cache.valid,
            &mut dx,
            &mut grads[base..base + PER_LAYER],
        );
    }
    let (tok, rest) = grads.split_at_mut(1);
    for (i, &id) in cache.ids.iter().enumerate() {
        let row = &dx[i * d..(i + 1) * d];
        for (g, &v) in tok[0][id as usize * d..(id as usize + 1) * d].iter_mut().zip(row) {
            *g += v;
        }
        for (g, &v) in rest[0][i * d..(i + 1) * d].iter_mut().zip(row) {
            *g += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x = {x}");
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = [1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0];
        let (y, _) = layer_norm(&x, &[1.0; 4], &[0.0; 4], 2, 4);
        for row in y.chunks(4) {
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn affine_matches_naive() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let w: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let b = [0.25, -1.0];
        let out = affine(&a, &w, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let expect: f64 = b[j] + (0..k).map(|p| a[i * k + p] * w[p * n + j]).sum::<f64>();
                assert!((out[i * n + j] - expect).abs() < 1e-12);
            }
        }
    }
}
