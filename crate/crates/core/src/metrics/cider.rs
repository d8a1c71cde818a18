//! CIDEr-D: tf-idf n-gram cosine (orders 1–4) with clipped candidate
//! weights and a Gaussian length penalty, averaged over references, ×10.

use std::collections::{BTreeMap, BTreeSet};

use super::bleu::ngram_counts;
use crate::error::{Error, Result};

const MAX_N: usize = 4;
const SIGMA: f64 = 6.0;

type NgramVec = BTreeMap<Vec<usize>, f64>;

/// Document frequencies over a reference corpus; one "document" is the
/// union of an image's references.
#[derive(Debug, Clone)]
pub struct CiderScorer {
    df: BTreeMap<Vec<usize>, usize>,
    log_n: f64,
}

struct Weighted {
    vecs: [NgramVec; MAX_N],
    norms: [f64; MAX_N],
    len: usize,
}

impl CiderScorer {
    pub fn new(references: &[Vec<Vec<usize>>]) -> Result<Self> {
        if references.iter().any(Vec::is_empty) {
            return Err(Error::Metric("image with an empty reference set".into()));
        }
        let mut df = BTreeMap::new();
        for refs in references {
            let mut seen = BTreeSet::new();
            for r in refs {
                for n in 1..=MAX_N {
                    seen.extend(ngram_counts(r, n).into_keys().map(<[usize]>::to_vec));
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        Ok(Self { df, log_n: (references.len().max(1) as f64).ln() })
    }

    fn weigh(&self, tokens: &[usize]) -> Weighted {
        let mut vecs: [NgramVec; MAX_N] = Default::default();
        let mut norms = [0.0; MAX_N];
        for n in 1..=MAX_N {
            for (g, tf) in ngram_counts(tokens, n) {
                let df = self.df.get(g).copied().unwrap_or(0).max(1) as f64;
                let w = tf as f64 * (self.log_n - df.ln());
                norms[n - 1] += w * w;
                vecs[n - 1].insert(g.to_vec(), w);
            }
        }
        Weighted { vecs, norms: norms.map(f64::sqrt), len: tokens.len() }
    }

    fn sim(hyp: &Weighted, rf: &Weighted) -> [f64; MAX_N] {
        let delta = hyp.len as f64 - rf.len as f64;
        let penalty = (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
        let mut out = [0.0; MAX_N];
        for n in 0..MAX_N {
            let mut val = 0.0;
            for (g, &h) in &hyp.vecs[n] {
                if let Some(&r) = rf.vecs[n].get(g) {
                    val += h.min(r) * r;
                }
            }
            if hyp.norms[n] != 0.0 && rf.norms[n] != 0.0 {
                val /= hyp.norms[n] * rf.norms[n];
            }
            out[n] = val * penalty;
        }
        out
    }

    /// Score of one candidate against its image's references.
    pub fn score(&self, candidate: &[usize], references: &[Vec<usize>]) -> Result<f64> {
        if references.is_empty() {
            return Err(Error::Metric("empty reference set".into()));
        }
        let hyp = self.weigh(candidate);
        let mut total = 0.0;
        for r in references {
            let s = Self::sim(&hyp, &self.weigh(r));
            total += s.iter().sum::<f64>() / MAX_N as f64;
        }
        Ok(10.0 * total / references.len() as f64)
    }
}

/// Per-image scores with idf taken from `references` itself.
pub fn cider_per_image(candidates: &[Vec<usize>], references: &[Vec<Vec<usize>>]) -> Result<Vec<f64>> {
    if candidates.len() != references.len() {
        return Err(Error::Metric(format!("{} candidates for {} images", candidates.len(), references.len())));
    }
    let scorer = CiderScorer::new(references)?;
    candidates.iter().zip(references).map(|(c, r)| scorer.score(c, r)).collect()
}

/// Corpus CIDEr-D: mean of the per-image scores.
pub fn cider(candidates: &[Vec<usize>], references: &[Vec<Vec<usize>>]) -> Result<f64> {
    let mut s = cider_per_image(candidates, references)?;
    if s.is_empty() {
        return Err(Error::Metric("empty corpus".into()));
    }
    // Sorted summation: the corpus score does not depend on image order.
    s.sort_by(f64::total_cmp);
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}
