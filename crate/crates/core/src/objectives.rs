//! Training losses: joint teacher-forced / mask-predict cross-entropy,
//! the self-critical policy-gradient surrogate, and the calibration terms
//! (interchange alignment, KL on masked positions, observed-word CE).
//!
//! Reduction convention: sums over positions inside a sentence, mean over
//! the sentences of a batch.

use rand::seq::index;
use rand::Rng;

use crate::calibration::{ActivationTrace, NeuronMap};
use crate::data::CaptionRecord;
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::tensor::{Graph, Tensor, Var};
use crate::vocab::{shift_right, MASK};

/// Per-term values of one step, each already averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Components {
    pub aic_ce: f64,
    pub naic_ce: f64,
    pub kl: f64,
    pub ia: f64,
    pub scst_pseudo: f64,
    pub observed_ce: f64,
}

impl Components {
    pub const NAMES: [&'static str; 6] = ["aic_ce", "naic_ce", "kl", "ia", "scst_pseudo", "observed_ce"];

    pub fn named(&self) -> [(&'static str, f64); 6] {
        let v = [self.aic_ce, self.naic_ce, self.kl, self.ia, self.scst_pseudo, self.observed_ce];
        std::array::from_fn(|i| (Self::NAMES[i], v[i]))
    }

    pub fn add(&mut self, o: &Components) {
        self.aic_ce += o.aic_ce;
        self.naic_ce += o.naic_ce;
        self.kl += o.kl;
        self.ia += o.ia;
        self.scst_pseudo += o.scst_pseudo;
        self.observed_ce += o.observed_ce;
    }

    pub fn scale(&mut self, c: f64) {
        self.aic_ce *= c;
        self.naic_ce *= c;
        self.kl *= c;
        self.ia *= c;
        self.scst_pseudo *= c;
        self.observed_ce *= c;
    }
}

/// Which combination rule produced `total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    Joint,
    Scst,
    Cdc,
}

/// One row of a training log.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossReport {
    pub step: usize,
    pub kind: LossKind,
    pub total: f64,
    pub components: Components,
    pub lambda: f64,
    pub anneal_weight: f64,
    /// Mean |S_m| per sentence.
    pub masked_mean: f64,
    /// Σ|S_m| / Σ|S| over the batch.
    pub masked_frac: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str =
        "step,total,aic_ce,naic_ce,kl,ia,scst_pseudo,observed_ce,lambda,anneal_weight,masked_mean,masked_frac";

    /// `total` recomputed from the components under this report's rule.
    pub fn combined(&self) -> f64 {
        let c = &self.components;
        match self.kind {
            LossKind::Joint => self.lambda * c.aic_ce + (1.0 - self.lambda) * c.naic_ce,
            LossKind::Scst => c.scst_pseudo,
            LossKind::Cdc => loss_cdc(c.kl, c.ia, c.observed_ce, self.anneal_weight),
        }
    }

    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{}", self.step, self.total);
        for (_, v) in self.components.named() {
            s.push_str(&format!(",{v}"));
        }
        s.push_str(&format!(",{},{},{},{}", self.lambda, self.anneal_weight, self.masked_mean, self.masked_frac));
        s
    }
}

/// `−Σ_t log p(w_t | w_<t, I)` for one sentence, teacher-forced.
pub fn aic_ce_sentence(g: &mut Graph, bundle: &ModelBundle, features: &Tensor, target: &[usize]) -> Result<Var> {
    if target.is_empty() {
        return Err(Error::Degenerate("empty caption".into()));
    }
    let out = bundle.aic_forward(g, features, &shift_right(target))?;
    let logp = g.log_softmax(out.logits)?;
    let picks: Vec<(usize, usize)> = target.iter().copied().enumerate().collect();
    Ok(g.nll_sum(logp, &picks)?)
}

/// `n = max(1, round(ratio·len))` distinct positions, sorted.
pub fn sample_mask_positions(len: usize, ratio: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("mask_ratio {ratio} outside (0,1]")));
    }
    if len == 0 {
        return Err(Error::Degenerate("empty caption".into()));
    }
    let n = ((ratio * len as f64).round() as usize).clamp(1, len);
    let mut v = index::sample(rng, len, n).into_vec();
    v.sort_unstable();
    Ok(v)
}

/// `target` with `[mask]` at the given positions.
pub fn apply_mask(target: &[usize], masked: &[usize]) -> Vec<usize> {
    let mut v = target.to_vec();
    for &t in masked {
        v[t] = MASK;
    }
    v
}

/// `−Σ_{t∈S_m} log p(w_t | S_o, I)` under the mask-predict decoder.
pub fn naic_masked_sentence(
    g: &mut Graph,
    bundle: &ModelBundle,
    features: &Tensor,
    target: &[usize],
    masked: &[usize],
) -> Result<Var> {
    if masked.is_empty() {
        return Ok(g.zero());
    }
    let out = bundle.naic_forward(g, features, &apply_mask(target, masked))?;
    let logp = g.log_softmax(out.logits)?;
    let picks: Vec<(usize, usize)> = masked.iter().map(|&t| (t, target[t])).collect();
    Ok(g.nll_sum(logp, &picks)?)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} outside [0,1]")));
    }
    Ok(())
}

/// `λ·l_aic + (1−λ)·l_naic`.
pub fn loss_joint(l_aic: f64, l_naic: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(lambda * l_aic + (1.0 - lambda) * l_naic)
}

/// Graph form of [`loss_joint`]. At the endpoints the unused term is left
/// out of the graph, so its parameters receive no gradient at all.
pub fn joint_graph(g: &mut Graph, l_aic: Var, l_naic: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    if lambda == 1.0 {
        return Ok(l_aic);
    }
    if lambda == 0.0 {
        return Ok(l_naic);
    }
    let a = g.scale(l_aic, lambda)?;
    let b = g.scale(l_naic, 1.0 - lambda)?;
    Ok(g.add(a, b)?)
}

/// Stage-1 loss of one sentence with a fixed NAIC mask. Returns the
/// combined node and the two raw terms.
pub fn stage1_sentence(
    g: &mut Graph,
    bundle: &ModelBundle,
    record: &CaptionRecord,
    masked: &[usize],
    lambda: f64,
) -> Result<(Var, Var, Var)> {
    let features = record.features_tensor();
    let target = record.target();
    let aic = aic_ce_sentence(g, bundle, &features, &target)?;
    let naic = naic_masked_sentence(g, bundle, &features, &target, masked)?;
    Ok((joint_graph(g, aic, naic, lambda)?, aic, naic))
}

/// Batch mean of [`aic_ce_sentence`], no gradients.
pub fn loss_aic_ce(bundle: &ModelBundle, batch: &[CaptionRecord]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let mut total = 0.0;
    for r in batch {
        let mut g = Graph::detached(&bundle.store);
        let l = aic_ce_sentence(&mut g, bundle, &r.features_tensor(), &r.target())?;
        total += g.value(l).item();
    }
    Ok(total / batch.len() as f64)
}

/// Batch mean of the mask-predict loss with freshly drawn masks. Returns
/// the loss and the masks used.
pub fn loss_naic_masked(
    bundle: &ModelBundle,
    batch: &[CaptionRecord],
    mask_ratio: f64,
    rng: &mut impl Rng,
) -> Result<(f64, Vec<Vec<usize>>)> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let mut total = 0.0;
    let mut masks = Vec::with_capacity(batch.len());
    for r in batch {
        let target = r.target();
        let m = sample_mask_positions(target.len(), mask_ratio, rng)?;
        let mut g = Graph::detached(&bundle.store);
        let l = naic_masked_sentence(&mut g, bundle, &r.features_tensor(), &target, &m)?;
        total += g.value(l).item();
        masks.push(m);
    }
    Ok((total / batch.len() as f64, masks))
}

/// Advantages `r − mean(r)`. A single sample has zero advantage.
pub fn scst_advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.len() == 1 {
        log::warn!("self-critical batch of size 1: the mean baseline cancels the reward");
    }
    if rewards.is_empty() {
        return Vec::new();
    }
    let b = rewards.iter().sum::<f64>() / rewards.len() as f64;
    rewards.iter().map(|r| r - b).collect()
}

/// `−adv · Σ_t log p(sample_t | sample_<t, I)`, log-probabilities recomputed
/// by teacher forcing on the sample; `adv` is a constant.
pub fn scst_surrogate(g: &mut Graph, bundle: &ModelBundle, features: &Tensor, sample: &[usize], advantage: f64) -> Result<Var> {
    if sample.is_empty() {
        return Err(Error::Degenerate("empty sample".into()));
    }
    let out = bundle.aic_forward(g, features, &shift_right(sample))?;
    let logp = g.log_softmax(out.logits)?;
    let picks: Vec<(usize, usize)> = sample.iter().copied().enumerate().collect();
    let nll = g.nll_sum(logp, &picks)?;
    Ok(g.scale(nll, advantage)?)
}

/// `Σ_{t∈S_m} ‖h[t, N] − h̃[t, g(N)]‖²`. The teacher trace is a constant.
pub fn loss_interchange_alignment(
    g: &mut Graph,
    student: &ActivationTrace,
    teacher: &ActivationTrace,
    map: &NeuronMap,
) -> Result<Var> {
    if student.positions.is_empty() {
        return Ok(g.zero());
    }
    if student.positions != teacher.positions {
        return Err(Error::Shape("student and teacher traces cover different positions".into()));
    }
    let cols = student
        .neurons
        .iter()
        .map(|&n| {
            let image = map.image(n).ok_or(Error::Mapping(n))?;
            teacher.neurons.iter().position(|&m| m == image).ok_or(Error::Mapping(n))
        })
        .collect::<Result<Vec<_>>>()?;
    let p = student.positions.len();
    let mut target = Vec::with_capacity(p * cols.len());
    for r in 0..p {
        target.extend(cols.iter().map(|&c| teacher.get(r, c)));
    }
    let target = g.constant(Tensor::matrix(p, cols.len(), target)?)?;
    let s = match student.var {
        Some(v) => v,
        None => g.constant(Tensor::matrix(p, student.neurons.len(), student.values.clone())?)?,
    };
    Ok(g.squared_distance(s, target)?)
}

/// `Σ_{t∈S_m} KL(q_t ‖ p_t)`. `student_log_probs` is `T×V`; `teacher` holds
/// one probability row per masked position, in `masked` order.
pub fn loss_kl_unconfident(g: &mut Graph, student_log_probs: Var, teacher: &Tensor, masked: &[usize]) -> Result<Var> {
    if masked.is_empty() {
        log::debug!("empty masked set: KL term is 0");
        return Ok(g.zero());
    }
    let rows = g.gather_rows(student_log_probs, masked)?;
    Ok(g.kl_from_log_probs(teacher, rows)?)
}

/// `−Σ_{t∈S_o} log p_t(w_t)`.
pub fn observed_ce(g: &mut Graph, student_log_probs: Var, target: &[usize], observed: &[usize]) -> Result<Var> {
    if observed.is_empty() {
        return Ok(g.zero());
    }
    let picks: Vec<(usize, usize)> = observed.iter().map(|&t| (t, target[t])).collect();
    Ok(g.nll_sum(student_log_probs, &picks)?)
}

/// `w·(kl + ia) + observed_ce`.
pub fn loss_cdc(kl: f64, ia: f64, observed_ce: f64, anneal_w: f64) -> f64 {
    anneal_w * (kl + ia) + observed_ce
}

pub fn cdc_graph(g: &mut Graph, kl: Var, ia: Var, observed_ce: Var, anneal_w: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&anneal_w) {
        return Err(Error::Config(format!("anneal weight {anneal_w} outside [0,1]")));
    }
    let d = g.add(kl, ia)?;
    let d = g.scale(d, anneal_w)?;
    Ok(g.add(d, observed_ce)?)
}

/// Linear decay `1 − step/total`, clamped to 0 past the end.
pub fn anneal_weight(step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 || step > total_steps {
        log::warn!("anneal step {step} past total {total_steps}; clamping weight to 0");
        return 0.0;
    }
    1.0 - step as f64 / total_steps as f64
}
