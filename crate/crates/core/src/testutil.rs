//! Small fixtures shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::CaptionRecord;
pub use crate::model::check_param_grads;
use crate::model::{ModelBundle, ModelConfig};

pub const VOCAB: usize = 11;
pub const D_FEAT: usize = 5;

pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_ff: 12,
        n_heads: 2,
        enc_layers: 1,
        dec_layers: 2,
        vocab_size: VOCAB,
        max_len: 8,
        d_feat: D_FEAT,
        max_patches: 4,
        layer_norm_eps: 1e-5,
        encoder_positions: false,
        init_seed: seed,
        tie_decoder_init: false,
    }
}

pub fn tiny_bundle(seed: u64) -> ModelBundle {
    ModelBundle::new(tiny_config(seed)).unwrap()
}

/// Record with random features and one random reference of `len` words.
pub fn tiny_record(seed: u64, len: usize) -> CaptionRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = (0..3).map(|_| (0..D_FEAT).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let reference = (0..len).map(|_| rng.random_range(4..VOCAB)).collect();
    CaptionRecord { id: format!("r{seed}"), features, references: vec![reference] }
}

pub fn tiny_batch(n: usize) -> Vec<CaptionRecord> {
    (0..n).map(|i| tiny_record(100 + i as u64, 2 + i % 4)).collect()
}
