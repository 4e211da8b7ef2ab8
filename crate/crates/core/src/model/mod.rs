//! The spatiotemporal encoder-decoder network.
//!
//! Flattened panel windows become token sequences (one token per unit per
//! time step, time-major); learnable spatial, temporal, and target
//! embeddings are added on top of a linear projection of the covariates.
//! A bidirectional encoder digests the pre-intervention window; a decoder
//! with a modified causal mask — backward-only across time slices, fully
//! bidirectional within one — generates the target unit's trajectory.

mod layers;
mod mask;
mod net;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::mat::Mat;
use crate::rng::{self, StreamRng};
use crate::{Error, Result};

pub use mask::{build_decoder_mask, AttentionMask};
pub use net::{
    backward, decoder_forward, encoder_forward, extract_attention, forward, forward_traced,
    tokenize, ForwardTrace, WindowAttention,
};

/// Architecture hyperparameters. `hidden_dim` must divide evenly across
/// `num_heads`; the feed-forward width defaults to four times the hidden
/// width.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
    /// Pre-intervention window length l⁻.
    pub l_minus: usize,
    /// Post-intervention window length l⁺.
    pub l_plus: usize,
    /// Total units U = N + 1 (donors plus target).
    pub num_units: usize,
    pub num_covariates: usize,
    /// Temporal-embedding capacity; window offsets beyond this are errors.
    pub max_time: usize,
}

impl ModelConfig {
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        hidden_dim: usize,
        l_minus: usize,
        l_plus: usize,
        num_units: usize,
        num_covariates: usize,
        max_time: usize,
    ) -> Self {
        ModelConfig {
            num_layers,
            num_heads,
            hidden_dim,
            ffn_dim: 4 * hidden_dim,
            dropout_rate: 0.1,
            l_minus,
            l_plus,
            num_units,
            num_covariates,
            max_time,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.hidden_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Invalid("model dimensions must be positive".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Invalid(format!(
                "hidden dim {} not divisible by {} heads",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.l_minus == 0 || self.l_plus == 0 {
            return Err(Error::Invalid("window lengths must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Invalid("dropout rate must lie in [0, 1)".into()));
        }
        if self.num_units == 0 || self.num_covariates == 0 || self.max_time == 0 {
            return Err(Error::Invalid("panel dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Classifies parameters for the optimizer: weight decay applies to weights
/// and biases but never to embeddings or normalization parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Embedding,
    NormGain,
    NormBias,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: Mat,
    pub bq: Mat,
    pub wk: Mat,
    pub bk: Mat,
    pub wv: Mat,
    pub bv: Mat,
    pub wo: Mat,
    pub bo: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: Mat,
    pub bias: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayerParams {
    pub ln1: LayerNormParams,
    pub self_attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub ln3: LayerNormParams,
    pub ffn: FfnParams,
}

/// All learnable arrays, shapes fixed by the [`ModelConfig`] they embed.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    /// Input projection, K × D.
    pub w_e: Mat,
    /// Output projection, D × K.
    pub w_d: Mat,
    /// Spatial embedding table, U × D.
    pub spatial: Mat,
    /// Temporal embedding table, T × D.
    pub temporal: Mat,
    /// Target-vs-donor embedding table, 2 × D.
    pub target: Mat,
    pub encoder: Vec<EncoderLayerParams>,
    pub decoder: Vec<DecoderLayerParams>,
}

fn init_mat(rows: usize, cols: usize, kind: ParamKind, rng: &mut StreamRng) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    match kind {
        ParamKind::Weight | ParamKind::Embedding => {
            for v in m.data_mut() {
                *v = rng::truncated_normal(rng, 0.02);
            }
        }
        ParamKind::NormGain => m.fill(1.0),
        ParamKind::Bias | ParamKind::NormBias => {}
    }
    m
}

fn init_attention(d: usize, rng: &mut StreamRng) -> AttentionParams {
    AttentionParams {
        wq: init_mat(d, d, ParamKind::Weight, rng),
        bq: init_mat(1, d, ParamKind::Bias, rng),
        wk: init_mat(d, d, ParamKind::Weight, rng),
        bk: init_mat(1, d, ParamKind::Bias, rng),
        wv: init_mat(d, d, ParamKind::Weight, rng),
        bv: init_mat(1, d, ParamKind::Bias, rng),
        wo: init_mat(d, d, ParamKind::Weight, rng),
        bo: init_mat(1, d, ParamKind::Bias, rng),
    }
}

fn init_ffn(d: usize, f: usize, rng: &mut StreamRng) -> FfnParams {
    FfnParams {
        w1: init_mat(d, f, ParamKind::Weight, rng),
        b1: init_mat(1, f, ParamKind::Bias, rng),
        w2: init_mat(f, d, ParamKind::Weight, rng),
        b2: init_mat(1, d, ParamKind::Bias, rng),
    }
}

fn init_norm(d: usize, rng: &mut StreamRng) -> LayerNormParams {
    LayerNormParams {
        gain: init_mat(1, d, ParamKind::NormGain, rng),
        bias: init_mat(1, d, ParamKind::NormBias, rng),
    }
}

impl Parameters {
    /// Fresh parameters: truncated normal (σ = 0.02) for weights and
    /// embeddings, zero biases, unit norm gains. The draw order is the
    /// canonical tensor order, so a seed pins every byte of the result.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[rng::TAG_INIT]);
        let d = config.hidden_dim;
        let f = config.ffn_dim;
        let w_e = init_mat(config.num_covariates, d, ParamKind::Weight, &mut rng);
        let w_d = init_mat(d, config.num_covariates, ParamKind::Weight, &mut rng);
        let spatial = init_mat(config.num_units, d, ParamKind::Embedding, &mut rng);
        let temporal = init_mat(config.max_time, d, ParamKind::Embedding, &mut rng);
        let target = init_mat(2, d, ParamKind::Embedding, &mut rng);
        let encoder = (0..config.num_layers)
            .map(|_| EncoderLayerParams {
                ln1: init_norm(d, &mut rng),
                attn: init_attention(d, &mut rng),
                ln2: init_norm(d, &mut rng),
                ffn: init_ffn(d, f, &mut rng),
            })
            .collect();
        let decoder = (0..config.num_layers)
            .map(|_| DecoderLayerParams {
                ln1: init_norm(d, &mut rng),
                self_attn: init_attention(d, &mut rng),
                ln2: init_norm(d, &mut rng),
                cross_attn: init_attention(d, &mut rng),
                ln3: init_norm(d, &mut rng),
                ffn: init_ffn(d, f, &mut rng),
            })
            .collect();
        Ok(Parameters { config, w_e, w_d, spatial, temporal, target, encoder, decoder })
    }

    /// Same shapes, all zeros. Used for gradients and optimizer moments.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.fill(0.0);
        }
        out
    }

    /// Canonical tensor order shared with [`Self::tensors_mut`] and
    /// [`Self::tensor_descriptors`]; checkpoints and the optimizer rely on
    /// all three staying aligned (a unit test enforces it).
    pub fn tensors(&self) -> Vec<&Mat> {
        let mut out = Vec::new();
        out.push(&self.w_e);
        out.push(&self.w_d);
        out.push(&self.spatial);
        out.push(&self.temporal);
        out.push(&self.target);
        for layer in &self.encoder {
            out.extend([&layer.ln1.gain, &layer.ln1.bias]);
            let a = &layer.attn;
            out.extend([&a.wq, &a.bq, &a.wk, &a.bk, &a.wv, &a.bv, &a.wo, &a.bo]);
            out.extend([&layer.ln2.gain, &layer.ln2.bias]);
            out.extend([&layer.ffn.w1, &layer.ffn.b1, &layer.ffn.w2, &layer.ffn.b2]);
        }
        for layer in &self.decoder {
            out.extend([&layer.ln1.gain, &layer.ln1.bias]);
            let a = &layer.self_attn;
            out.extend([&a.wq, &a.bq, &a.wk, &a.bk, &a.wv, &a.bv, &a.wo, &a.bo]);
            out.extend([&layer.ln2.gain, &layer.ln2.bias]);
            let c = &layer.cross_attn;
            out.extend([&c.wq, &c.bq, &c.wk, &c.bk, &c.wv, &c.bv, &c.wo, &c.bo]);
            out.extend([&layer.ln3.gain, &layer.ln3.bias]);
            out.extend([&layer.ffn.w1, &layer.ffn.b1, &layer.ffn.w2, &layer.ffn.b2]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = Vec::new();
        out.push(&mut self.w_e);
        out.push(&mut self.w_d);
        out.push(&mut self.spatial);
        out.push(&mut self.temporal);
        out.push(&mut self.target);
        for layer in &mut self.encoder {
            out.extend([&mut layer.ln1.gain, &mut layer.ln1.bias]);
            let a = &mut layer.attn;
            out.extend([&mut a.wq, &mut a.bq, &mut a.wk, &mut a.bk, &mut a.wv, &mut a.bv, &mut a.wo, &mut a.bo]);
            out.extend([&mut layer.ln2.gain, &mut layer.ln2.bias]);
            let f = &mut layer.ffn;
            out.extend([&mut f.w1, &mut f.b1, &mut f.w2, &mut f.b2]);
        }
        for layer in &mut self.decoder {
            out.extend([&mut layer.ln1.gain, &mut layer.ln1.bias]);
            let a = &mut layer.self_attn;
            out.extend([&mut a.wq, &mut a.bq, &mut a.wk, &mut a.bk, &mut a.wv, &mut a.bv, &mut a.wo, &mut a.bo]);
            out.extend([&mut layer.ln2.gain, &mut layer.ln2.bias]);
            let c = &mut layer.cross_attn;
            out.extend([&mut c.wq, &mut c.bq, &mut c.wk, &mut c.bk, &mut c.wv, &mut c.bv, &mut c.wo, &mut c.bo]);
            out.extend([&mut layer.ln3.gain, &mut layer.ln3.bias]);
            let f = &mut layer.ffn;
            out.extend([&mut f.w1, &mut f.b1, &mut f.w2, &mut f.b2]);
        }
        out
    }

    /// `(name, kind)` per tensor, in canonical order.
    pub fn tensor_descriptors(config: &ModelConfig) -> Vec<(String, ParamKind)> {
        use ParamKind::*;
        let mut out: Vec<(String, ParamKind)> = Vec::new();
        out.push(("w_e".into(), Weight));
        out.push(("w_d".into(), Weight));
        out.push(("spatial".into(), Embedding));
        out.push(("temporal".into(), Embedding));
        out.push(("target".into(), Embedding));
        fn attn(out: &mut Vec<(String, ParamKind)>, prefix: &str) {
            for (suffix, kind) in [
                ("wq", Weight),
                ("bq", Bias),
                ("wk", Weight),
                ("bk", Bias),
                ("wv", Weight),
                ("bv", Bias),
                ("wo", Weight),
                ("bo", Bias),
            ] {
                out.push((format!("{prefix}.{suffix}"), kind));
            }
        }
        fn norm(out: &mut Vec<(String, ParamKind)>, prefix: &str) {
            out.push((format!("{prefix}.gain"), NormGain));
            out.push((format!("{prefix}.bias"), NormBias));
        }
        fn ffn(out: &mut Vec<(String, ParamKind)>, prefix: &str) {
            for (suffix, kind) in [("w1", Weight), ("b1", Bias), ("w2", Weight), ("b2", Bias)] {
                out.push((format!("{prefix}.{suffix}"), kind));
            }
        }
        for l in 0..config.num_layers {
            norm(&mut out, &format!("enc.{l}.ln1"));
            attn(&mut out, &format!("enc.{l}.attn"));
            norm(&mut out, &format!("enc.{l}.ln2"));
            ffn(&mut out, &format!("enc.{l}.ffn"));
        }
        for l in 0..config.num_layers {
            norm(&mut out, &format!("dec.{l}.ln1"));
            attn(&mut out, &format!("dec.{l}.self_attn"));
            norm(&mut out, &format!("dec.{l}.ln2"));
            attn(&mut out, &format!("dec.{l}.cross_attn"));
            norm(&mut out, &format!("dec.{l}.ln3"));
            ffn(&mut out, &format!("dec.{l}.ffn"));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn axpy(&mut self, alpha: f64, other: &Parameters) {
        let theirs = other.tensors();
        let mine = self.tensors_mut();
        assert_eq!(mine.len(), theirs.len());
        for (a, b) in mine.into_iter().zip(theirs) {
            a.axpy(alpha, b);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.scale(alpha);
        }
    }
}

/// The tiny configuration exercised throughout the test suites: D=8, one
/// layer, one head, U=3, l⁻=4, l⁺=2, K=2, dropout off.
pub fn tiny_config() -> ModelConfig {
    let mut cfg = ModelConfig::new(1, 1, 8, 4, 2, 3, 2, 12);
    cfg.dropout_rate = 0.0;
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptors_align_with_tensors() {
        let cfg = tiny_config();
        let params = Parameters::init(cfg.clone(), 1).unwrap();
        let desc = Parameters::tensor_descriptors(&cfg);
        assert_eq!(desc.len(), params.tensors().len());
        let shapes_shared: Vec<(usize, usize)> = params.tensors().iter().map(|t| (t.rows(), t.cols())).collect();
        let mut p2 = params.clone();
        let shapes_mut: Vec<(usize, usize)> = p2.tensors_mut().iter().map(|t| (t.rows(), t.cols())).collect();
        assert_eq!(shapes_shared, shapes_mut);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = tiny_config();
        let a = Parameters::init(cfg.clone(), 7).unwrap();
        let b = Parameters::init(cfg.clone(), 7).unwrap();
        let c = Parameters::init(cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_respects_kinds() {
        let cfg = tiny_config();
        let params = Parameters::init(cfg.clone(), 3).unwrap();
        let desc = Parameters::tensor_descriptors(&cfg);
        for (tensor, (name, kind)) in params.tensors().into_iter().zip(&desc) {
            match kind {
                ParamKind::Bias | ParamKind::NormBias => {
                    assert!(tensor.data().iter().all(|&v| v == 0.0), "{name} not zero");
                }
                ParamKind::NormGain => {
                    assert!(tensor.data().iter().all(|&v| v == 1.0), "{name} not one");
                }
                _ => {
                    assert!(tensor.data().iter().any(|&v| v != 0.0), "{name} all zero");
                    assert!(tensor.data().iter().all(|&v| v.abs() <= 0.04), "{name} exceeds truncation");
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.num_heads = 3; // 8 % 3 != 0
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.dropout_rate = 1.0;
        assert!(cfg.validate().is_err());
    }
}
