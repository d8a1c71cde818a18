use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the masked set S_m is chosen from a sentence's confidences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// `p_t ≤ ε`.
    Threshold,
    /// `k` positions uniformly at random.
    Random,
    /// `p_t > ε`.
    Highest,
    /// Positions whose argmax is not the target.
    Wrong,
    /// One partition per position, each masking only that position.
    OnlyOne,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 5] =
        [MaskStrategy::Threshold, MaskStrategy::Random, MaskStrategy::Highest, MaskStrategy::Wrong, MaskStrategy::OnlyOne];

    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::Threshold => "threshold",
            MaskStrategy::Random => "random",
            MaskStrategy::Highest => "highest",
            MaskStrategy::Wrong => "wrong",
            MaskStrategy::OnlyOne => "only_one",
        }
    }
}

impl std::str::FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskStrategy::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mask strategy {s:?}")))
    }
}

impl std::fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A split of a sentence's (0-indexed) positions into observed and masked.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPartition {
    pub sentence: Vec<usize>,
    pub observed: Vec<usize>,
    pub masked: Vec<usize>,
    pub strategy: MaskStrategy,
    pub epsilon: Option<f64>,
    pub probs: Vec<f64>,
}

/// Selection inputs beyond the per-position data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub strategy: MaskStrategy,
    pub epsilon: f64,
    /// Fixed count for [`MaskStrategy::Random`]; `None` means
    /// `max(1, round(mask_ratio·|S|))`.
    pub k: Option<usize>,
    pub mask_ratio: f64,
}

impl Selection {
    pub fn threshold(epsilon: f64) -> Self {
        Self { strategy: MaskStrategy::Threshold, epsilon, k: None, mask_ratio: 0.3 }
    }
}

/// Builds the partition(s) for one sentence. Only
/// [`MaskStrategy::OnlyOne`] returns more than one.
pub fn select_masked_set(
    probs: &[f64],
    targets: &[usize],
    argmax: &[usize],
    sel: &Selection,
    rng: &mut impl Rng,
) -> Result<Vec<MaskPartition>> {
    let n = probs.len();
    if targets.len() != n || argmax.len() != n {
        return Err(Error::Shape(format!(
            "selection inputs differ in length: {} probs, {} targets, {} argmax",
            n,
            targets.len(),
            argmax.len()
        )));
    }
    let build = |masked: Vec<usize>| {
        let observed = (0..n).filter(|t| !masked.contains(t)).collect();
        let epsilon = matches!(sel.strategy, MaskStrategy::Threshold | MaskStrategy::Highest).then_some(sel.epsilon);
        MaskPartition { sentence: targets.to_vec(), observed, masked, strategy: sel.strategy, epsilon, probs: probs.to_vec() }
    };
    let parts = match sel.strategy {
        MaskStrategy::Threshold => vec![build((0..n).filter(|&t| probs[t] <= sel.epsilon).collect())],
        MaskStrategy::Highest => vec![build((0..n).filter(|&t| probs[t] > sel.epsilon).collect())],
        MaskStrategy::Wrong => vec![build((0..n).filter(|&t| argmax[t] != targets[t]).collect())],
        MaskStrategy::OnlyOne => (0..n).map(|t| build(vec![t])).collect(),
        MaskStrategy::Random => {
            let k = sel.k.unwrap_or_else(|| ((sel.mask_ratio * n as f64).round() as usize).max(1));
            if k > n {
                return Err(Error::Selection(format!("cannot pick {k} positions from a sentence of {n}")));
            }
            let mut m = index::sample(rng, n, k).into_vec();
            m.sort_unstable();
            vec![build(m)]
        }
    };
    Ok(parts)
}
