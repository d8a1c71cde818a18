use rand::Rng;

use super::{decode_causal, ModelBundle, Path};
use crate::error::Result;
use crate::tensor::{log_softmax_row, Graph, Tensor};
use crate::vocab::{self, BOS, EOS};

/// A generated caption and the log-probability of each generated token.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub tokens: Vec<usize>,
    pub log_probs: Vec<f64>,
}

impl DecodeOutput {
    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }

    /// Tokens with a trailing end symbol removed.
    pub fn words(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Index drawn from `probs` by inverting the cumulative sum at `u ∈ [0,1)`.
pub fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

impl ModelBundle {
    fn generate(&self, features: &Tensor, max_len: usize, mut pick: impl FnMut(&[f64]) -> usize) -> Result<DecodeOutput> {
        let mut g = Graph::detached(&self.store);
        let memory = self.encode(&mut g, features, Path::Aic)?;
        let max_len = max_len.min(self.aic.max_len);
        let mut inputs = vec![BOS];
        let mut out = DecodeOutput { tokens: Vec::new(), log_probs: Vec::new() };
        while out.tokens.len() < max_len {
            let step = decode_causal(&mut g, &self.aic, &inputs, memory)?;
            let logits = g.value(step.logits);
            let row = logits.row(logits.rows() - 1);
            let mut logp = vec![0.0; row.len()];
            log_softmax_row(row, &mut logp);
            let tok = pick(&logp);
            out.tokens.push(tok);
            out.log_probs.push(logp[tok]);
            if tok == EOS {
                break;
            }
            inputs.push(tok);
        }
        Ok(out)
    }

    /// Argmax decoding until `<eos>` or `max_len` tokens. Ties go to the
    /// lower token id.
    pub fn greedy_decode(&self, features: &Tensor, max_len: usize) -> Result<DecodeOutput> {
        self.generate(features, max_len, |logp| {
            let mut best = EOS;
            for (t, &v) in logp.iter().enumerate() {
                if vocab::is_emittable(t) && v > logp[best] {
                    best = t;
                }
            }
            best
        })
    }

    /// Ancestral sampling from the autoregressive distribution at
    /// temperature 1.
    pub fn sample_decode<R: Rng>(&self, features: &Tensor, max_len: usize, rng: &mut R) -> Result<DecodeOutput> {
        self.generate(features, max_len, |logp| {
            let probs: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
            sample_categorical(&probs, rng.random::<f64>())
        })
    }
}
