//! Masked-set selection, activation retrieval, the neuron map, and the two
//! training stages (joint pre-training and calibration of the causal
//! decoder against the frozen mask-predict teacher).

mod masks;
mod optim;
mod trace;
mod train;

pub use masks::{select_masked_set, MaskPartition, MaskStrategy, Selection};
pub use optim::Adam;
pub use trace::{get_activations, sample_neuron_map, ActivationTrace, NeuronMap, TraceSource};
pub use train::{
    calibrate, cdc_gradients, cdc_sentence, cdc_step, scst_step, stage1_gradients, student_pass, train_cdc,
    train_stage1, CdcConfig, CdcOutcome, CdcTerms, RewardFn, Stage1Config, StudentPass,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent stream for `(seed, tags…)`.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    let mut h = mix(seed);
    for &t in tags {
        h = mix(h ^ mix(t));
    }
    ChaCha8Rng::seed_from_u64(h)
}
