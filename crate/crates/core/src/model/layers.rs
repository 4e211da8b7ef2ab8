//! Forward/backward primitives: linear, layer norm, GELU feed-forward, and
//! (masked) multi-head attention. Forward passes record the intermediates
//! the hand-written reverse passes need.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use rand::Rng;

use super::mask::AttentionMask;
use super::{AttentionParams, FfnParams, LayerNormParams};
use crate::mat::Mat;
use crate::rng::StreamRng;

/// Additive logit penalty for disallowed keys; exp underflows to exactly
/// zero after the max shift, which the causality probes rely on.
const MASK_PENALTY: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

pub(crate) fn linear(x: &Mat, w: &Mat, b: &Mat) -> Mat {
    let mut y = x.matmul(w);
    for i in 0..y.rows() {
        let row = y.row_mut(i);
        for (v, &bias) in row.iter_mut().zip(b.row(0)) {
            *v += bias;
        }
    }
    y
}

/// Accumulates `(dx into return, dw += x^T dy, db += colsum dy)`.
pub(crate) fn linear_backward(x: &Mat, w: &Mat, dy: &Mat, dw: &mut Mat, db: &mut Mat) -> Mat {
    dw.add_assign(&x.matmul_ta(dy));
    for i in 0..dy.rows() {
        let row = dy.row(i);
        for (g, &v) in db.row_mut(0).iter_mut().zip(row) {
            *g += v;
        }
    }
    dy.matmul_tb(w)
}

pub(crate) struct LayerNormCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_forward(x: &Mat, p: &LayerNormParams) -> (Mat, LayerNormCache) {
    let d = x.cols();
    let mut y = Mat::zeros(x.rows(), d);
    let mut xhat = Mat::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    let gain = p.gain.row(0);
    let bias = p.bias.row(0);
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        let xh = xhat.row_mut(i);
        let yo = y.row_mut(i);
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xh[j] = h;
            yo[j] = gain[j] * h + bias[j];
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward(
    dy: &Mat,
    cache: &LayerNormCache,
    p: &LayerNormParams,
    dgain: &mut Mat,
    dbias: &mut Mat,
) -> Mat {
    let d = dy.cols();
    let mut dx = Mat::zeros(dy.rows(), d);
    let gain = p.gain.row(0);
    for i in 0..dy.rows() {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        {
            let dg = dgain.row_mut(0);
            let db = dbias.row_mut(0);
            for j in 0..d {
                dg[j] += dyr[j] * xh[j];
                db[j] += dyr[j];
            }
        }
        // dxhat = dy ⊙ gain; dx = inv_std (dxhat − mean(dxhat) − xhat·mean(dxhat ⊙ xhat))
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for j in 0..d {
            let dxh = dyr[j] * gain[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j];
        }
        let mean_dxh = sum_dxh / d as f64;
        let mean_dxh_xh = sum_dxh_xh / d as f64;
        let inv = cache.inv_std[i];
        let out = dx.row_mut(i);
        for j in 0..d {
            let dxh = dyr[j] * gain[j];
            out[j] = inv * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    dx
}

// GELU, tanh approximation. Matches the derivative exactly below.
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    let sech2 = 1.0 - th * th;
    0.5 * (1.0 + th) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Multiplier matrix for inverted dropout: 0 with probability `rate`, else
/// `1/(1-rate)`.
fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut StreamRng) -> Mat {
    let scale = 1.0 / (1.0 - rate);
    let mut m = Mat::zeros(rows, cols);
    for v in m.data_mut() {
        let u: f64 = rng.random();
        *v = if u < rate { 0.0 } else { scale };
    }
    m
}

pub(crate) struct FfnCache {
    pre_act: Mat,
    post_act: Mat,
    drop: Option<Mat>,
}

pub(crate) fn ffn_forward(
    x: &Mat,
    p: &FfnParams,
    dropout_rate: f64,
    rng: &mut Option<&mut StreamRng>,
) -> (Mat, FfnCache) {
    let pre_act = linear(x, &p.w1, &p.b1);
    let mut post_act = pre_act.clone();
    for v in post_act.data_mut() {
        *v = gelu(*v);
    }
    let mut y = linear(&post_act, &p.w2, &p.b2);
    let drop = match rng {
        Some(r) if dropout_rate > 0.0 => {
            let mask = dropout_mask(y.rows(), y.cols(), dropout_rate, r);
            for (v, &m) in y.data_mut().iter_mut().zip(mask.data()) {
                *v *= m;
            }
            Some(mask)
        }
        _ => None,
    };
    (y, FfnCache { pre_act, post_act, drop })
}

pub(crate) fn ffn_backward(
    dy: &Mat,
    x: &Mat,
    p: &FfnParams,
    cache: &FfnCache,
    grads: &mut FfnParams,
) -> Mat {
    let mut dy = dy.clone();
    if let Some(mask) = &cache.drop {
        for (v, &m) in dy.data_mut().iter_mut().zip(mask.data()) {
            *v *= m;
        }
    }
    let mut dpost = linear_backward(&cache.post_act, &p.w2, &dy, &mut grads.w2, &mut grads.b2);
    for (g, &u) in dpost.data_mut().iter_mut().zip(cache.pre_act.data()) {
        *g *= gelu_prime(u);
    }
    linear_backward(x, &p.w1, &dpost, &mut grads.w1, &mut grads.b1)
}

pub(crate) struct AttnCache {
    q: Mat,
    k: Mat,
    v: Mat,
    /// Post-softmax probabilities per head, before dropout.
    pub(crate) probs: Vec<Mat>,
    drop: Option<Vec<Mat>>,
    /// Concatenated per-head context, before the output projection.
    context: Mat,
}

fn head_slice(m: &Mat, head: usize, dim: usize) -> Mat {
    let mut out = Mat::zeros(m.rows(), dim);
    for i in 0..m.rows() {
        let src = &m.row(i)[head * dim..(head + 1) * dim];
        out.row_mut(i).copy_from_slice(src);
    }
    out
}

fn head_scatter_add(into: &mut Mat, head: usize, dim: usize, part: &Mat) {
    for i in 0..part.rows() {
        let dst = &mut into.row_mut(i)[head * dim..(head + 1) * dim];
        for (d, &s) in dst.iter_mut().zip(part.row(i)) {
            *d += s;
        }
    }
}

/// Scaled dot-product attention over `heads` heads. Queries come from
/// `x_q`, keys and values from `x_kv`. Disallowed positions receive an
/// additive -1e9 on the logits; the softmax max-shift is taken over allowed
/// keys so masked weights underflow to exactly zero.
pub(crate) fn attention_forward(
    x_q: &Mat,
    x_kv: &Mat,
    p: &AttentionParams,
    heads: usize,
    mask: Option<&AttentionMask>,
    dropout_rate: f64,
    rng: &mut Option<&mut StreamRng>,
) -> (Mat, AttnCache) {
    let d_model = x_q.cols();
    let d_head = d_model / heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let q = linear(x_q, &p.wq, &p.bq);
    let k = linear(x_kv, &p.wk, &p.bk);
    let v = linear(x_kv, &p.wv, &p.bv);

    let mut context = Mat::zeros(x_q.rows(), d_model);
    let mut probs = Vec::with_capacity(heads);
    let mut drops: Vec<Mat> = Vec::new();
    for h in 0..heads {
        let qh = head_slice(&q, h, d_head);
        let kh = head_slice(&k, h, d_head);
        let vh = head_slice(&v, h, d_head);
        let mut scores = qh.matmul_tb(&kh);
        scores.scale(scale);
        if let Some(m) = mask {
            debug_assert_eq!((m.queries(), m.keys()), (scores.rows(), scores.cols()));
            for qi in 0..scores.rows() {
                let row = scores.row_mut(qi);
                for (ki, s) in row.iter_mut().enumerate() {
                    if !m.allows(qi, ki) {
                        *s += MASK_PENALTY;
                    }
                }
            }
        }
        softmax_rows(&mut scores, mask);
        let mut attn = scores.clone();
        if let (Some(r), true) = (rng.as_deref_mut(), dropout_rate > 0.0) {
            let dm = dropout_mask(attn.rows(), attn.cols(), dropout_rate, r);
            for (a, &m) in attn.data_mut().iter_mut().zip(dm.data()) {
                *a *= m;
            }
            drops.push(dm);
        }
        let ctx_h = attn.matmul(&vh);
        head_scatter_add(&mut context, h, d_head, &ctx_h);
        probs.push(scores);
    }
    let out = linear(&context, &p.wo, &p.bo);
    let drop = if drops.is_empty() { None } else { Some(drops) };
    (out, AttnCache { q, k, v, probs, drop, context })
}

/// Softmax per row; the max shift is computed over allowed keys only (all
/// keys when unmasked).
fn softmax_rows(scores: &mut Mat, mask: Option<&AttentionMask>) {
    for qi in 0..scores.rows() {
        let row = scores.row_mut(qi);
        let mut max = f64::NEG_INFINITY;
        match mask {
            Some(m) => {
                for (ki, &s) in row.iter().enumerate() {
                    if m.allows(qi, ki) && s > max {
                        max = s;
                    }
                }
            }
            None => {
                for &s in row.iter() {
                    if s > max {
                        max = s;
                    }
                }
            }
        }
        let mut sum = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        let inv = 1.0 / sum;
        for s in row.iter_mut() {
            *s *= inv;
        }
    }
}

/// Returns `(dx_q, dx_kv)`; parameter gradients accumulate into `grads`.
/// For self-attention the caller adds the two input gradients.
pub(crate) fn attention_backward(
    dout: &Mat,
    x_q: &Mat,
    x_kv: &Mat,
    p: &AttentionParams,
    heads: usize,
    cache: &AttnCache,
    grads: &mut AttentionParams,
) -> (Mat, Mat) {
    let d_model = x_q.cols();
    let d_head = d_model / heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let dcontext = linear_backward(&cache.context, &p.wo, dout, &mut grads.wo, &mut grads.bo);

    let mut dq = Mat::zeros(cache.q.rows(), d_model);
    let mut dk = Mat::zeros(cache.k.rows(), d_model);
    let mut dv = Mat::zeros(cache.v.rows(), d_model);
    for h in 0..heads {
        let qh = head_slice(&cache.q, h, d_head);
        let kh = head_slice(&cache.k, h, d_head);
        let vh = head_slice(&cache.v, h, d_head);
        let dctx_h = head_slice(&dcontext, h, d_head);
        let probs = &cache.probs[h];
        // Effective attention (after dropout) multiplied V in the forward.
        let (dattn, attn_eff);
        match cache.drop.as_ref() {
            Some(masks) => {
                let dm = &masks[h];
                let mut eff = probs.clone();
                for (a, &m) in eff.data_mut().iter_mut().zip(dm.data()) {
                    *a *= m;
                }
                let mut da = dctx_h.matmul_tb(&vh);
                for (g, &m) in da.data_mut().iter_mut().zip(dm.data()) {
                    *g *= m;
                }
                dattn = da;
                attn_eff = eff;
            }
            None => {
                dattn = dctx_h.matmul_tb(&vh);
                attn_eff = probs.clone();
            }
        }
        let dvh = attn_eff.matmul_ta(&dctx_h);
        // Softmax Jacobian: ds = P ⊙ (dP − Σ_k dP·P per row).
        let mut dscores = Mat::zeros(probs.rows(), probs.cols());
        for i in 0..probs.rows() {
            let pr = probs.row(i);
            let dr = dattn.row(i);
            let dot: f64 = pr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
            let out = dscores.row_mut(i);
            for j in 0..pr.len() {
                out[j] = pr[j] * (dr[j] - dot);
            }
        }
        dscores.scale(scale);
        let dqh = dscores.matmul(&kh);
        let dkh = dscores.matmul_ta(&qh);
        head_scatter_add(&mut dq, h, d_head, &dqh);
        head_scatter_add(&mut dk, h, d_head, &dkh);
        head_scatter_add(&mut dv, h, d_head, &dvh);
    }

    let dxq = linear_backward(x_q, &p.wq, &dq, &mut grads.wq, &mut grads.bq);
    let mut dxkv = linear_backward(x_kv, &p.wk, &dk, &mut grads.wk, &mut grads.bk);
    dxkv.add_assign(&linear_backward(x_kv, &p.wv, &dv, &mut grads.wv, &mut grads.bv));
    (dxq, dxkv)
}
