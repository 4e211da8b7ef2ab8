//! Network assembly: tokenization of flattened windows, the pre-norm
//! encoder/decoder stacks, the end-to-end forward pass, its hand-written
//! reverse pass, and attention extraction for interpretability reports.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use super::layers::{
    attention_backward, attention_forward, ffn_backward, ffn_forward, layer_norm_backward,
    layer_norm_forward, AttnCache, FfnCache, LayerNormCache,
};
use super::mask::{build_decoder_mask, AttentionMask};
use super::Parameters;
use crate::mat::Mat;
use crate::panel::Window;
use crate::rng::StreamRng;
use crate::{Error, Result};

/// Flattens a window into a time-major token sequence (token s = t·U + u)
/// and adds the learnable embeddings:
///
/// `token(u,t) = row(u,t)·W_e + spatial[unit] + temporal[start+t] + target[u == target_row]`
pub fn tokenize(window: &Window, params: &Parameters) -> Result<Mat> {
    let (tokens, _) = tokenize_with_inputs(window, params)?;
    Ok(tokens)
}

fn tokenize_with_inputs(window: &Window, params: &Parameters) -> Result<(Mat, Mat)> {
    let cfg = &params.config;
    if window.start_time + window.len > cfg.max_time {
        return Err(Error::Invalid(format!(
            "temporal table exhausted: window [{}, {}) exceeds capacity {}",
            window.start_time,
            window.start_time + window.len,
            cfg.max_time
        )));
    }
    if window.covariates != cfg.num_covariates {
        return Err(Error::Invalid(format!(
            "window has {} covariates, model expects {}",
            window.covariates, cfg.num_covariates
        )));
    }
    let units = window.unit_count();
    let seq = units * window.len;
    let mut flat = Mat::zeros(seq, cfg.num_covariates);
    for t in 0..window.len {
        for u in 0..units {
            let row = flat.row_mut(t * units + u);
            for (k, slot) in row.iter_mut().enumerate() {
                *slot = window.value(u, t, k);
            }
        }
    }
    let mut tokens = flat.matmul(&params.w_e);
    for t in 0..window.len {
        for u in 0..units {
            let unit = window.unit_ids[u];
            if unit >= cfg.num_units {
                return Err(Error::Invalid(format!(
                    "unit id {unit} outside spatial table of size {}",
                    cfg.num_units
                )));
            }
            let flag = usize::from(u == window.target_row);
            let row = tokens.row_mut(t * units + u);
            let spatial = params.spatial.row(unit);
            let temporal = params.temporal.row(window.start_time + t);
            let target = params.target.row(flag);
            for j in 0..row.len() {
                row[j] += spatial[j] + temporal[j] + target[j];
            }
        }
    }
    Ok((tokens, flat))
}

fn tokenize_backward(window: &Window, flat: &Mat, dtokens: &Mat, grads: &mut Parameters) {
    grads.w_e.add_assign(&flat.matmul_ta(dtokens));
    let units = window.unit_count();
    for t in 0..window.len {
        for u in 0..units {
            let drow = dtokens.row(t * units + u);
            let unit = window.unit_ids[u];
            let flag = usize::from(u == window.target_row);
            for (j, &g) in drow.iter().enumerate() {
                grads.spatial[(unit, j)] += g;
                grads.temporal[(window.start_time + t, j)] += g;
                grads.target[(flag, j)] += g;
            }
        }
    }
}

pub(crate) struct EncoderLayerTrace {
    x_in: Mat,
    ln1: LayerNormCache,
    h1: Mat,
    attn: AttnCache,
    x2: Mat,
    ln2: LayerNormCache,
    h2: Mat,
    ffn: FfnCache,
}

fn encoder_stack(
    tokens: &Mat,
    params: &Parameters,
    dropout_rate: f64,
    rng: &mut Option<&mut StreamRng>,
) -> Result<(Mat, Vec<EncoderLayerTrace>)> {
    let mut x = tokens.clone();
    let mut traces = Vec::with_capacity(params.encoder.len());
    for (i, layer) in params.encoder.iter().enumerate() {
        let x_in = x.clone();
        let (h1, ln1) = layer_norm_forward(&x, &layer.ln1);
        let (a, attn) =
            attention_forward(&h1, &h1, &layer.attn, params.config.num_heads, None, dropout_rate, rng);
        x.add_assign(&a);
        let x2 = x.clone();
        let (h2, ln2) = layer_norm_forward(&x, &layer.ln2);
        let (f, ffn) = ffn_forward(&h2, &layer.ffn, dropout_rate, rng);
        x.add_assign(&f);
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("encoder layer {i} activations")));
        }
        traces.push(EncoderLayerTrace { x_in, ln1, h1, attn, x2, ln2, h2, ffn });
    }
    Ok((x, traces))
}

fn encoder_stack_backward(
    dout: Mat,
    traces: &[EncoderLayerTrace],
    params: &Parameters,
    grads: &mut Parameters,
) -> Mat {
    let heads = params.config.num_heads;
    let mut dx = dout;
    for (layer, gl, trace) in itercells(&params.encoder, &mut grads.encoder, traces) {
        // out = x2 + ffn(LN2(x2))
        let dffn = dx.clone();
        let dh2 = ffn_backward(&dffn, &trace.h2, &layer.ffn, &trace.ffn, &mut gl.ffn);
        let dx2_from_norm = layer_norm_backward(&dh2, &trace.ln2, &layer.ln2, &mut gl.ln2.gain, &mut gl.ln2.bias);
        dx.add_assign(&dx2_from_norm);
        // x2 = x_in + attn(LN1(x_in))
        let dattn = dx.clone();
        let (dh1_q, dh1_kv) = attention_backward(
            &dattn,
            &trace.h1,
            &trace.h1,
            &layer.attn,
            heads,
            &trace.attn,
            &mut gl.attn,
        );
        let mut dh1 = dh1_q;
        dh1.add_assign(&dh1_kv);
        let dx_from_norm = layer_norm_backward(&dh1, &trace.ln1, &layer.ln1, &mut gl.ln1.gain, &mut gl.ln1.bias);
        dx.add_assign(&dx_from_norm);
        let _ = &trace.x_in;
        let _ = &trace.x2;
    }
    dx
}

// Reverse zip over layers, their gradient slots, and their traces.
fn itercells<'a, P, T>(
    layers: &'a [P],
    grads: &'a mut [P],
    traces: &'a [T],
) -> impl Iterator<Item = (&'a P, &'a mut P, &'a T)> {
    layers.iter().rev().zip(grads.iter_mut().rev()).zip(traces.iter().rev()).map(|((l, g), t)| (l, g, t))
}

pub(crate) struct DecoderLayerTrace {
    ln1: LayerNormCache,
    h1: Mat,
    self_attn: AttnCache,
    ln2: LayerNormCache,
    h2: Mat,
    cross_attn: AttnCache,
    ln3: LayerNormCache,
    h3: Mat,
    ffn: FfnCache,
}

fn decoder_stack(
    tokens: &Mat,
    memory: &Mat,
    mask: &AttentionMask,
    params: &Parameters,
    dropout_rate: f64,
    rng: &mut Option<&mut StreamRng>,
) -> Result<(Mat, Vec<DecoderLayerTrace>)> {
    if mask.queries() != tokens.rows() || mask.keys() != tokens.rows() {
        return Err(Error::Invalid(format!(
            "mask of {}×{} does not fit decoder sequence of length {}",
            mask.queries(),
            mask.keys(),
            tokens.rows()
        )));
    }
    let heads = params.config.num_heads;
    let mut x = tokens.clone();
    let mut traces = Vec::with_capacity(params.decoder.len());
    for (i, layer) in params.decoder.iter().enumerate() {
        let (h1, ln1) = layer_norm_forward(&x, &layer.ln1);
        let (sa, self_attn) =
            attention_forward(&h1, &h1, &layer.self_attn, heads, Some(mask), dropout_rate, rng);
        x.add_assign(&sa);
        let (h2, ln2) = layer_norm_forward(&x, &layer.ln2);
        let (ca, cross_attn) =
            attention_forward(&h2, memory, &layer.cross_attn, heads, None, dropout_rate, rng);
        x.add_assign(&ca);
        let (h3, ln3) = layer_norm_forward(&x, &layer.ln3);
        let (f, ffn) = ffn_forward(&h3, &layer.ffn, dropout_rate, rng);
        x.add_assign(&f);
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("decoder layer {i} activations")));
        }
        traces.push(DecoderLayerTrace { ln1, h1, self_attn, ln2, h2, cross_attn, ln3, h3, ffn });
    }
    Ok((x, traces))
}

/// Returns `(dtokens, dmemory)`.
fn decoder_stack_backward(
    dout: Mat,
    traces: &[DecoderLayerTrace],
    memory: &Mat,
    params: &Parameters,
    grads: &mut Parameters,
) -> (Mat, Mat) {
    let heads = params.config.num_heads;
    let mut dx = dout;
    let mut dmemory = Mat::zeros(memory.rows(), memory.cols());
    for (layer, gl, trace) in itercells(&params.decoder, &mut grads.decoder, traces) {
        let dffn = dx.clone();
        let dh3 = ffn_backward(&dffn, &trace.h3, &layer.ffn, &trace.ffn, &mut gl.ffn);
        let dx3 = layer_norm_backward(&dh3, &trace.ln3, &layer.ln3, &mut gl.ln3.gain, &mut gl.ln3.bias);
        dx.add_assign(&dx3);

        let dcross = dx.clone();
        let (dh2, dmem_part) = attention_backward(
            &dcross,
            &trace.h2,
            memory,
            &layer.cross_attn,
            heads,
            &trace.cross_attn,
            &mut gl.cross_attn,
        );
        dmemory.add_assign(&dmem_part);
        let dx2 = layer_norm_backward(&dh2, &trace.ln2, &layer.ln2, &mut gl.ln2.gain, &mut gl.ln2.bias);
        dx.add_assign(&dx2);

        let dself = dx.clone();
        let (dh1_q, dh1_kv) = attention_backward(
            &dself,
            &trace.h1,
            &trace.h1,
            &layer.self_attn,
            heads,
            &trace.self_attn,
            &mut gl.self_attn,
        );
        let mut dh1 = dh1_q;
        dh1.add_assign(&dh1_kv);
        let dx1 = layer_norm_backward(&dh1, &trace.ln1, &layer.ln1, &mut gl.ln1.gain, &mut gl.ln1.bias);
        dx.add_assign(&dx1);
    }
    (dx, dmemory)
}

/// Everything one forward pass produced, sufficient to run the reverse pass
/// or extract attention.
pub struct ForwardTrace {
    pre: Window,
    post: Window,
    enc_flat: Mat,
    dec_flat: Mat,
    enc_traces: Vec<EncoderLayerTrace>,
    dec_traces: Vec<DecoderLayerTrace>,
    pub memory: Mat,
    pub decoder_out: Mat,
    /// Decoder hidden states at the target unit's positions, l⁺ × D.
    pub target_hidden: Mat,
    /// Predicted target rows, l⁺ × K.
    pub predictions: Mat,
    capture: bool,
}

/// Runs the full pipeline: tokenize both windows, encode the pre window,
/// decode the post window against the encoder memory under the modified
/// causal mask, then project the target unit's hidden states to covariates.
///
/// Dropout is active only when `training` is set and a generator is given.
pub fn forward_traced(
    pre: &Window,
    post: &Window,
    params: &Parameters,
    training: bool,
    mut rng: Option<&mut StreamRng>,
    capture: bool,
) -> Result<ForwardTrace> {
    if pre.unit_ids != post.unit_ids || pre.target_row != post.target_row {
        return Err(Error::Invalid("pre and post windows disagree on units".into()));
    }
    let dropout = if training { params.config.dropout_rate } else { 0.0 };
    let (enc_tokens, enc_flat) = tokenize_with_inputs(pre, params)?;
    let (dec_tokens, dec_flat) = tokenize_with_inputs(post, params)?;
    let (memory, enc_traces) = encoder_stack(&enc_tokens, params, dropout, &mut rng)?;
    let mask = build_decoder_mask(post.unit_count(), post.len);
    let (decoder_out, dec_traces) = decoder_stack(&dec_tokens, &memory, &mask, params, dropout, &mut rng)?;

    let units = post.unit_count();
    let mut target_hidden = Mat::zeros(post.len, params.config.hidden_dim);
    for t in 0..post.len {
        target_hidden
            .row_mut(t)
            .copy_from_slice(decoder_out.row(t * units + post.target_row));
    }
    let predictions = target_hidden.matmul(&params.w_d);
    Ok(ForwardTrace {
        pre: pre.clone(),
        post: post.clone(),
        enc_flat,
        dec_flat,
        enc_traces,
        dec_traces,
        memory,
        decoder_out,
        target_hidden,
        predictions,
        capture,
    })
}

/// Predicted target rows (l⁺ × K) for the window pair.
pub fn forward(
    pre: &Window,
    post: &Window,
    params: &Parameters,
    training: bool,
    rng: Option<&mut StreamRng>,
) -> Result<Mat> {
    Ok(forward_traced(pre, post, params, training, rng, false)?.predictions)
}

/// Reverse pass: gradients of a scalar loss with cotangent `dpredictions`
/// (l⁺ × K) with respect to every parameter tensor.
pub fn backward(trace: &ForwardTrace, dpredictions: &Mat, params: &Parameters) -> Result<Parameters> {
    let mut grads = params.zeros_like();
    let units = trace.post.unit_count();

    grads.w_d.add_assign(&trace.target_hidden.matmul_ta(dpredictions));
    let dtarget_hidden = dpredictions.matmul_tb(&params.w_d);
    let mut d_decoder_out = Mat::zeros(trace.decoder_out.rows(), trace.decoder_out.cols());
    for t in 0..trace.post.len {
        d_decoder_out
            .row_mut(t * units + trace.post.target_row)
            .copy_from_slice(dtarget_hidden.row(t));
    }

    let (d_dec_tokens, dmemory) =
        decoder_stack_backward(d_decoder_out, &trace.dec_traces, &trace.memory, params, &mut grads);
    let d_enc_tokens = encoder_stack_backward(dmemory, &trace.enc_traces, params, &mut grads);

    tokenize_backward(&trace.post, &trace.dec_flat, &d_dec_tokens, &mut grads);
    tokenize_backward(&trace.pre, &trace.enc_flat, &d_enc_tokens, &mut grads);
    Ok(grads)
}

/// Runs the full encoder on an already-tokenized sequence. Bidirectional:
/// no mask is applied.
pub fn encoder_forward(
    tokens: &Mat,
    params: &Parameters,
    training: bool,
    mut rng: Option<&mut StreamRng>,
) -> Result<Mat> {
    let dropout = if training { params.config.dropout_rate } else { 0.0 };
    Ok(encoder_stack(tokens, params, dropout, &mut rng)?.0)
}

/// Runs the full decoder on a tokenized sequence against encoder `memory`.
/// Self-attention respects `mask`; cross-attention is unmasked.
pub fn decoder_forward(
    tokens: &Mat,
    memory: &Mat,
    mask: &AttentionMask,
    params: &Parameters,
    training: bool,
    mut rng: Option<&mut StreamRng>,
) -> Result<Mat> {
    let dropout = if training { params.config.dropout_rate } else { 0.0 };
    Ok(decoder_stack(tokens, memory, mask, params, dropout, &mut rng)?.0)
}

/// Per-window attention summary: for each generated target step, the mean
/// weight assigned to each donor unit by the final decoder self-attention
/// layer.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    /// Global unit ids of the donors, in window row order.
    pub donor_units: Vec<usize>,
    /// (donor × l⁺) mean attention weights.
    pub weights: Mat,
}

/// Probes the final decoder self-attention layer: for the target query at
/// step t, weights are averaged over heads and over the donor's tokens at
/// the visible time slices (≤ t). Requires a trace captured with
/// `capture = true`.
pub fn extract_attention(trace: &ForwardTrace) -> Result<WindowAttention> {
    if !trace.capture {
        return Err(Error::Invalid("attention capture was not enabled for this pass".into()));
    }
    let last = trace
        .dec_traces
        .last()
        .ok_or_else(|| Error::Invalid("decoder has no layers".into()))?;
    let units = trace.post.unit_count();
    let steps = trace.post.len;
    let target_row = trace.post.target_row;
    let donor_units: Vec<usize> = trace
        .post
        .unit_ids
        .iter()
        .copied()
        .enumerate()
        .filter(|&(row, _)| row != target_row)
        .map(|(_, unit)| unit)
        .collect();
    let donor_rows: Vec<usize> = (0..units).filter(|&r| r != target_row).collect();
    let mut weights = Mat::zeros(donor_rows.len(), steps);
    let heads = last.self_attn.probs.len() as f64;
    for t in 0..steps {
        let q = t * units + target_row;
        for (d, &row) in donor_rows.iter().enumerate() {
            let mut acc = 0.0;
            for probs in &last.self_attn.probs {
                for tk in 0..=t {
                    acc += probs[(q, tk * units + row)];
                }
            }
            weights[(d, t)] = acc / (heads * (t + 1) as f64);
        }
    }
    Ok(WindowAttention { donor_units, weights })
}
