//! Shared region encoder, causal (autoregressive) decoder and mask-predict
//! (bidirectional) decoder.

mod checkpoint;
mod decoding;
mod layers;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::Checkpoint;
pub use decoding::{sample_categorical, DecodeOutput};
pub use layers::{
    build_attention_mask, decode_bidirectional, decode_causal, encode, sinusoidal_positions, AttentionParams,
    DecoderLayerParams, DecoderMode, DecoderOutput, DecoderParams, Dims, EncoderLayerParams, EncoderParams,
    FeedForwardParams, NormParams, NormedAttention, EXCLUDED_LOGIT,
};

use crate::error::{Error, Result};
use crate::tensor::{gradcheck, Graph, ParamId, ParamStore, Tensor, Var};
use layers::Init;

/// Network sizes. `desk` is the default used everywhere in this crate;
/// `paper_scale` keeps the full-size transformer-base shape around.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_feat: usize,
    pub max_patches: usize,
    pub layer_norm_eps: f64,
    pub encoder_positions: bool,
    pub init_seed: u64,
    /// Start the mask-predict decoder from the same values as the causal
    /// one instead of its own draw.
    pub tie_decoder_init: bool,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize, d_feat: usize) -> Self {
        Self {
            d_model: 32,
            d_ff: 128,
            n_heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            vocab_size,
            max_len: 16,
            d_feat,
            max_patches: 16,
            layer_norm_eps: 1e-5,
            encoder_positions: false,
            init_seed: 0,
            tie_decoder_init: true,
        }
    }

    pub fn paper_scale(vocab_size: usize, d_feat: usize) -> Self {
        Self { d_model: 512, d_ff: 2048, n_heads: 8, enc_layers: 6, dec_layers: 6, ..Self::desk(vocab_size, d_feat) }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("d_feat", self.d_feat),
            ("max_patches", self.max_patches),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if self.vocab_size <= crate::vocab::FIRST_WORD {
            return Err(Error::Config("vocabulary has no word tokens".into()));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    fn dims(&self) -> Dims {
        Dims { d_model: self.d_model, n_heads: self.n_heads, eps: self.layer_norm_eps }
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(format!("model.{k}"), v);
        };
        put("d_model", self.d_model.to_string());
        put("d_ff", self.d_ff.to_string());
        put("n_heads", self.n_heads.to_string());
        put("enc_layers", self.enc_layers.to_string());
        put("dec_layers", self.dec_layers.to_string());
        put("vocab_size", self.vocab_size.to_string());
        put("max_len", self.max_len.to_string());
        put("d_feat", self.d_feat.to_string());
        put("max_patches", self.max_patches.to_string());
        put("layer_norm_eps", format!("{:e}", self.layer_norm_eps));
        put("encoder_positions", self.encoder_positions.to_string());
        put("init_seed", self.init_seed.to_string());
        put("tie_decoder_init", self.tie_decoder_init.to_string());
        m
    }

    pub fn from_kv(m: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(m: &BTreeMap<String, String>, k: &str) -> Result<T> {
            let key = format!("model.{k}");
            m.get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing {key}")))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad value for {key}")))
        }
        let c = Self {
            d_model: get(m, "d_model")?,
            d_ff: get(m, "d_ff")?,
            n_heads: get(m, "n_heads")?,
            enc_layers: get(m, "enc_layers")?,
            dec_layers: get(m, "dec_layers")?,
            vocab_size: get(m, "vocab_size")?,
            max_len: get(m, "max_len")?,
            d_feat: get(m, "d_feat")?,
            max_patches: get(m, "max_patches")?,
            layer_norm_eps: get(m, "layer_norm_eps")?,
            encoder_positions: get(m, "encoder_positions")?,
            init_seed: get(m, "init_seed")?,
            tie_decoder_init: get(m, "tie_decoder_init")?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Which encoder a forward pass reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Path {
    Aic,
    Naic,
}

/// All parameters of both captioners.
///
/// With a shared encoder both paths read the same `enc.*` storage. After
/// [`ModelBundle::split_encoders`] the mask-predict path reads its own
/// `naic_enc.*` copy.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub naic_encoder: Option<EncoderParams>,
    pub aic: DecoderParams,
    pub naic: DecoderParams,
}

impl ModelBundle {
    /// Fresh bundle with one encoder shared by both decoders.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut init = Init { store: &mut store, rng: &mut rng };
        let c = &config;
        let dims = c.dims();
        let encoder =
            EncoderParams::init(&mut init, "enc", dims, c.d_ff, c.d_feat, c.max_patches, c.enc_layers, c.encoder_positions);
        let aic = DecoderParams::init(&mut init, "aic", DecoderMode::Causal, dims, c.d_ff, c.vocab_size, c.max_len, c.dec_layers);
        let naic =
            DecoderParams::init(&mut init, "naic", DecoderMode::Bidirectional, dims, c.d_ff, c.vocab_size, c.max_len, c.dec_layers);
        if c.tie_decoder_init {
            for (src, dst) in aic.param_ids().into_iter().zip(naic.param_ids()) {
                let v = store.value(src).clone();
                store.get_mut(dst).value = v;
            }
        }
        Ok(Self { config, store, encoder, naic_encoder: None, aic, naic })
    }

    /// Fresh bundle where each decoder has its own encoder from the start.
    pub fn new_separate(config: ModelConfig) -> Result<Self> {
        let mut b = Self::new(config)?;
        b.split_encoders();
        Ok(b)
    }

    pub fn shared_encoder(&self) -> bool {
        self.naic_encoder.is_none()
    }

    pub fn encoder_for(&self, path: Path) -> &EncoderParams {
        match (path, &self.naic_encoder) {
            (Path::Naic, Some(e)) => e,
            _ => &self.encoder,
        }
    }

    /// Clones the shared encoder into a separate `naic_enc.*` copy used by
    /// the mask-predict path from now on. No-op when already split.
    pub fn split_encoders(&mut self) {
        if self.naic_encoder.is_some() {
            return;
        }
        let mut copy = self.encoder.clone();
        let mut remap = |id: &mut ParamId| {
            let p = self.store.get(*id);
            let name = p.name.replacen("enc.", "naic_enc.", 1);
            let value = p.value.clone();
            *id = self.store.add(name, value);
        };
        remap(&mut copy.proj_w);
        remap(&mut copy.proj_b);
        for l in &mut copy.layers {
            for id in attn_ids_mut(&mut l.attn) {
                remap(id);
            }
            for id in [&mut l.ffn.w1, &mut l.ffn.b1, &mut l.ffn.w2, &mut l.ffn.b2, &mut l.ffn_norm.gain, &mut l.ffn_norm.bias] {
                remap(id);
            }
        }
        self.naic_encoder = Some(copy);
    }

    /// Parameters of the mask-predict side: its decoder plus, when split,
    /// its own encoder copy.
    pub fn teacher_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.naic.param_ids();
        if let Some(e) = &self.naic_encoder {
            ids.extend(e.param_ids());
        }
        ids
    }

    /// Parameters updated by the autoregressive side: encoder and decoder.
    pub fn student_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.param_ids();
        ids.extend(self.aic.param_ids());
        ids
    }

    pub fn set_teacher_frozen(&mut self, frozen: bool) {
        for id in self.teacher_param_ids() {
            self.store.set_requires_grad(id, !frozen);
        }
    }

    pub fn teacher_frozen(&self) -> bool {
        self.teacher_param_ids().iter().all(|&id| !self.store.get(id).requires_grad)
    }

    /// Encoder memory for one path.
    pub fn encode(&self, g: &mut Graph, features: &Tensor, path: Path) -> Result<crate::tensor::Var> {
        encode(g, self.encoder_for(path), features)
    }

    /// Teacher-forced autoregressive pass over `inputs` (`<bos>`-shifted).
    pub fn aic_forward(&self, g: &mut Graph, features: &Tensor, inputs: &[usize]) -> Result<DecoderOutput> {
        let memory = self.encode(g, features, Path::Aic)?;
        decode_causal(g, &self.aic, inputs, memory)
    }

    /// Mask-predict pass over a partially observed sentence.
    pub fn naic_forward(&self, g: &mut Graph, features: &Tensor, observed: &[usize]) -> Result<DecoderOutput> {
        let memory = self.encode(g, features, Path::Naic)?;
        decode_bidirectional(g, &self.naic, observed, memory)
    }

    /// Byte image of a parameter subset, in the given order.
    pub fn serialize_params(&self, ids: &[ParamId]) -> Vec<u8> {
        let mut out = Vec::new();
        for &id in ids {
            let p = self.store.get(id);
            out.extend_from_slice(p.name.as_bytes());
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

fn attn_ids_mut(n: &mut NormedAttention) -> [&mut ParamId; 10] {
    let a = &mut n.attn;
    [&mut a.wq, &mut a.bq, &mut a.wk, &mut a.bk, &mut a.wv, &mut a.bv, &mut a.wo, &mut a.bo, &mut n.norm.gain, &mut n.norm.bias]
}

/// Compares the backward pass of `loss` against central differences on the
/// first `per_param` coordinates of each listed parameter. Returns the
/// largest relative error. Panics if a name is unknown.
pub fn check_param_grads(
    bundle: &ModelBundle,
    params: &[&str],
    per_param: usize,
    loss: impl Fn(&mut Graph, &ModelBundle) -> Var,
) -> f64 {
    let mut g = Graph::with_params(&bundle.store);
    let l = loss(&mut g, bundle);
    let grads = g.backward(l).unwrap().param_grads(bundle.store.len());
    let mut worst: f64 = 0.0;
    for name in params {
        let id: ParamId = bundle.store.find(name).unwrap_or_else(|| panic!("{name}"));
        let orig = bundle.store.value(id).data().to_vec();
        let n = per_param.min(orig.len());
        let analytic: Vec<f64> =
            grads.get(id).map(|g| g[..n].to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let mut probe = bundle.clone();
        let numeric = gradcheck::central_difference(
            |x| {
                probe.store.get_mut(id).value.data_mut()[..n].copy_from_slice(x);
                let mut g = Graph::detached(&probe.store);
                let l = loss(&mut g, &probe);
                g.value(l).item()
            },
            &orig[..n],
            gradcheck::STEP,
        );
        worst = worst.max(gradcheck::max_relative_error(&analytic, &numeric));
    }
    worst
}
