use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::vocab::{self, MASK};

/// Additive logit offset that removes a token from a decoder's support.
/// `exp` of it underflows to exactly zero.
pub const EXCLUDED_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderMode {
    Causal,
    Bidirectional,
}

/// `T×T` attention permission matrix, row-major. Causal allows `(i, j)`
/// iff `j <= i`.
pub fn build_attention_mask(mode: DecoderMode, len: usize) -> Vec<Vec<bool>> {
    (0..len)
        .map(|i| (0..len).map(|j| mode == DecoderMode::Bidirectional || j <= i).collect())
        .collect()
}

fn flat_mask(mode: DecoderMode, len: usize) -> Rc<[bool]> {
    build_attention_mask(mode, len).into_iter().flatten().collect::<Vec<_>>().into()
}

/// Fixed sinusoidal position table, `len×d`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("positive dims")
}

pub(crate) struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data).expect("positive dims"))
    }

    fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        self.uniform(name, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }

    fn fill(&mut self, name: String, n: usize, v: f64) -> ParamId {
        self.store.add(name, Tensor::vector(vec![v; n]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttentionParams {
    fn init<R: Rng>(init: &mut Init<R>, prefix: &str, d: usize) -> Self {
        let mut w = |n: &str| init.weight(format!("{prefix}.{n}"), d, d);
        let (wq, wk, wv, wo) = (w("wq"), w("wk"), w("wv"), w("wo"));
        let mut b = |n: &str| init.fill(format!("{prefix}.{n}"), d, 0.0);
        let (bq, bk, bv, bo) = (b("bq"), b("bk"), b("bv"), b("bo"));
        Self { wq, bq, wk, bk, wv, bv, wo, bo }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForwardParams {
    fn init<R: Rng>(init: &mut Init<R>, prefix: &str, d: usize, d_ff: usize) -> Self {
        Self {
            w1: init.weight(format!("{prefix}.w1"), d, d_ff),
            b1: init.fill(format!("{prefix}.b1"), d_ff, 0.0),
            w2: init.weight(format!("{prefix}.w2"), d_ff, d),
            b2: init.fill(format!("{prefix}.b2"), d, 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    fn init<R: Rng>(init: &mut Init<R>, prefix: &str, d: usize) -> Self {
        Self { gain: init.fill(format!("{prefix}.gain"), d, 1.0), bias: init.fill(format!("{prefix}.bias"), d, 0.0) }
    }
}

/// Shape hyper-parameters shared by every block of one network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dims {
    pub d_model: usize,
    pub n_heads: usize,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub attn: NormedAttention,
    pub ffn: FeedForwardParams,
    pub ffn_norm: NormParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormedAttention {
    pub attn: AttentionParams,
    pub norm: NormParams,
}

/// Patch projection plus a stack of self-attention / feed-forward layers.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub dims: Dims,
    pub d_feat: usize,
    pub max_patches: usize,
    pub positions: bool,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub layers: Vec<EncoderLayerParams>,
}

impl EncoderParams {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn init<R: Rng>(
        init: &mut Init<R>,
        prefix: &str,
        dims: Dims,
        d_ff: usize,
        d_feat: usize,
        max_patches: usize,
        n_layers: usize,
        positions: bool,
    ) -> Self {
        let d = dims.d_model;
        let proj_w = init.weight(format!("{prefix}.proj.w"), d_feat, d);
        let proj_b = init.fill(format!("{prefix}.proj.b"), d, 0.0);
        let layers = (0..n_layers)
            .map(|l| {
                let p = format!("{prefix}.l{l}");
                EncoderLayerParams {
                    attn: NormedAttention {
                        attn: AttentionParams::init(init, &format!("{p}.self"), d),
                        norm: NormParams::init(init, &format!("{p}.norm1"), d),
                    },
                    ffn: FeedForwardParams::init(init, &format!("{p}.ffn"), d, d_ff),
                    ffn_norm: NormParams::init(init, &format!("{p}.norm2"), d),
                }
            })
            .collect();
        Self { dims, d_feat, max_patches, positions, proj_w, proj_b, layers }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.proj_w, self.proj_b];
        for l in &self.layers {
            v.extend(l.attn.ids());
            v.extend(ffn_ids(&l.ffn));
            v.extend([l.ffn_norm.gain, l.ffn_norm.bias]);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerParams {
    pub self_attn: NormedAttention,
    pub cross_attn: NormedAttention,
    pub ffn: FeedForwardParams,
    pub ffn_norm: NormParams,
}

/// Token embedding, decoder stack and output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub mode: DecoderMode,
    pub dims: Dims,
    pub vocab_size: usize,
    pub max_len: usize,
    pub embed: ParamId,
    pub layers: Vec<DecoderLayerParams>,
    pub out_w: ParamId,
}

impl DecoderParams {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn init<R: Rng>(
        init: &mut Init<R>,
        prefix: &str,
        mode: DecoderMode,
        dims: Dims,
        d_ff: usize,
        vocab_size: usize,
        max_len: usize,
        n_layers: usize,
    ) -> Self {
        let d = dims.d_model;
        let embed = init.uniform(format!("{prefix}.embed"), &[vocab_size, d], 1.0);
        let layers = (0..n_layers)
            .map(|l| {
                let p = format!("{prefix}.l{l}");
                DecoderLayerParams {
                    self_attn: NormedAttention {
                        attn: AttentionParams::init(init, &format!("{p}.self"), d),
                        norm: NormParams::init(init, &format!("{p}.norm1"), d),
                    },
                    cross_attn: NormedAttention {
                        attn: AttentionParams::init(init, &format!("{p}.cross"), d),
                        norm: NormParams::init(init, &format!("{p}.norm2"), d),
                    },
                    ffn: FeedForwardParams::init(init, &format!("{p}.ffn"), d, d_ff),
                    ffn_norm: NormParams::init(init, &format!("{p}.norm3"), d),
                }
            })
            .collect();
        let out_w = init.weight(format!("{prefix}.out_w"), d, vocab_size);
        Self { mode, dims, vocab_size, max_len, embed, layers, out_w }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.embed];
        for l in &self.layers {
            v.extend(l.self_attn.ids());
            v.extend(l.cross_attn.ids());
            v.extend(ffn_ids(&l.ffn));
            v.extend([l.ffn_norm.gain, l.ffn_norm.bias]);
        }
        v.push(self.out_w);
        v
    }
}

impl NormedAttention {
    fn ids(&self) -> Vec<ParamId> {
        let a = &self.attn;
        vec![a.wq, a.bq, a.wk, a.bk, a.wv, a.bv, a.wo, a.bo, self.norm.gain, self.norm.bias]
    }
}

fn ffn_ids(f: &FeedForwardParams) -> [ParamId; 4] {
    [f.w1, f.b1, f.w2, f.b2]
}

fn linear(g: &mut Graph, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let (w, b) = (g.param(w), g.param(b));
    let y = g.matmul(x, w)?;
    Ok(g.add_row_bias(y, b)?)
}

/// Multi-head scaled dot-product attention of `query` rows over `memory` rows.
fn attention(g: &mut Graph, p: &AttentionParams, dims: Dims, query: Var, memory: Var, mask: Option<Rc<[bool]>>) -> Result<Var> {
    let q = linear(g, query, p.wq, p.bq)?;
    let k = linear(g, memory, p.wk, p.bk)?;
    let v = linear(g, memory, p.wv, p.bv)?;
    let dh = dims.d_model / dims.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(dims.n_heads);
    for h in 0..dims.n_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let probs = match &mask {
            Some(m) => g.masked_softmax(scores, m.clone())?,
            None => g.softmax(scores)?,
        };
        heads.push(g.matmul(probs, vh)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    linear(g, cat, p.wo, p.bo)
}

fn feed_forward(g: &mut Graph, p: &FeedForwardParams, x: Var) -> Result<Var> {
    let h = linear(g, x, p.w1, p.b1)?;
    let h = g.gelu(h)?;
    linear(g, h, p.w2, p.b2)
}

/// `LayerNorm(x + sublayer)`, post-norm.
fn residual_norm(g: &mut Graph, norm: &NormParams, eps: f64, x: Var, sub: Var) -> Result<Var> {
    let s = g.add(x, sub)?;
    let (gain, bias) = (g.param(norm.gain), g.param(norm.bias));
    Ok(g.layer_norm(s, gain, bias, eps)?)
}

/// Encodes `n_patch×d_feat` region features into `n_patch×d` memory.
pub fn encode(g: &mut Graph, enc: &EncoderParams, features: &Tensor) -> Result<Var> {
    let shape = features.shape();
    if shape.len() != 2 || shape[1] != enc.d_feat {
        return Err(Error::Shape(format!("features {:?} do not match feature dim {}", shape, enc.d_feat)));
    }
    if shape[0] > enc.max_patches {
        return Err(Error::Shape(format!("{} patches exceed the maximum of {}", shape[0], enc.max_patches)));
    }
    let x = g.constant(features.clone())?;
    let mut h = linear(g, x, enc.proj_w, enc.proj_b)?;
    if enc.positions {
        let pe = g.constant(sinusoidal_positions(shape[0], enc.dims.d_model))?;
        h = g.add(h, pe)?;
    }
    for layer in &enc.layers {
        let a = attention(g, &layer.attn.attn, enc.dims, h, h, None)?;
        let s = residual_norm(g, &layer.attn.norm, enc.dims.eps, h, a)?;
        let f = feed_forward(g, &layer.ffn, s)?;
        h = residual_norm(g, &layer.ffn_norm, enc.dims.eps, s, f)?;
    }
    Ok(h)
}

/// Logits and top-layer hidden states of one decoder pass.
#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    pub logits: Var,
    pub states: Var,
}

fn check_tokens(dec: &DecoderParams, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Degenerate("empty token sequence".into()));
    }
    if tokens.len() > dec.max_len {
        return Err(Error::Shape(format!("sequence length {} exceeds max_len {}", tokens.len(), dec.max_len)));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= dec.vocab_size) {
        return Err(crate::error::TensorError::Vocabulary { token: t, vocab: dec.vocab_size }.into());
    }
    Ok(())
}

fn decode(g: &mut Graph, dec: &DecoderParams, tokens: &[usize], memory: Var) -> Result<DecoderOutput> {
    check_tokens(dec, tokens)?;
    let t = tokens.len();
    let d = dec.dims.d_model;
    let embed = g.param(dec.embed);
    let e = g.gather_rows(embed, tokens)?;
    let pe = g.constant(sinusoidal_positions(t, d))?;
    let mut h = g.add(e, pe)?;
    let mask = match dec.mode {
        DecoderMode::Causal => Some(flat_mask(DecoderMode::Causal, t)),
        DecoderMode::Bidirectional => None,
    };
    for layer in &dec.layers {
        let a = attention(g, &layer.self_attn.attn, dec.dims, h, h, mask.clone())?;
        let s = residual_norm(g, &layer.self_attn.norm, dec.dims.eps, h, a)?;
        let c = attention(g, &layer.cross_attn.attn, dec.dims, s, memory, None)?;
        let c = residual_norm(g, &layer.cross_attn.norm, dec.dims.eps, s, c)?;
        let f = feed_forward(g, &layer.ffn, c)?;
        h = residual_norm(g, &layer.ffn_norm, dec.dims.eps, c, f)?;
    }
    let w = g.param(dec.out_w);
    let logits = g.matmul(h, w)?;
    let support: Vec<f64> = (0..dec.vocab_size).map(|v| if vocab::is_emittable(v) { 0.0 } else { EXCLUDED_LOGIT }).collect();
    let support = g.constant(Tensor::vector(support))?;
    let logits = g.add_row_bias(logits, support)?;
    Ok(DecoderOutput { logits, states: h })
}

/// Left-to-right decoder pass: position `t` sees tokens `0..=t` and memory.
pub fn decode_causal(g: &mut Graph, dec: &DecoderParams, tokens: &[usize], memory: Var) -> Result<DecoderOutput> {
    if dec.mode != DecoderMode::Causal {
        return Err(Error::ModeViolation("decode_causal called with a bidirectional decoder".into()));
    }
    if let Some(t) = tokens.iter().position(|&t| t == MASK) {
        return Err(Error::ModeViolation(format!("[mask] token at position {} in causal decoder input", t + 1)));
    }
    decode(g, dec, tokens, memory)
}

/// Mask-predict decoder pass: every position sees every position.
pub fn decode_bidirectional(g: &mut Graph, dec: &DecoderParams, observed: &[usize], memory: Var) -> Result<DecoderOutput> {
    if dec.mode != DecoderMode::Bidirectional {
        return Err(Error::ModeViolation("decode_bidirectional called with a causal decoder".into()));
    }
    decode(g, dec, observed, memory)
}
