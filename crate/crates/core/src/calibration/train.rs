use rand::seq::index;

use super::masks::{select_masked_set, MaskPartition, Selection};
use super::trace::{get_activations, sample_neuron_map, NeuronMap, TraceSource};
use super::{derive_rng, Adam};
use crate::analysis::PredictionLog;
use crate::data::CaptionRecord;
use crate::error::{Error, Result, TensorError};
use crate::metrics::{prediction_log, CiderScorer};
use crate::model::ModelBundle;
use crate::objectives::{
    apply_mask, cdc_graph, loss_interchange_alignment, loss_kl_unconfident, observed_ce, sample_mask_positions,
    scst_advantages, scst_surrogate, stage1_sentence, Components, LossKind, LossReport,
};
use crate::par::{self, Execution};
use crate::tensor::{Graph, ParamGrads, ParamId, Tensor, Var};
use crate::vocab::{self, shift_right, EOS};

const SALT_STAGE1: u64 = 1;
const SALT_SCST: u64 = 2;
const SALT_CDC: u64 = 3;
const SALT_MAP: u64 = 4;

/// Scores a candidate (word ids, no end symbol) against its references.
pub type RewardFn = dyn Fn(&[usize], &[Vec<usize>]) -> f64 + Sync;

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Config {
    pub lambda: f64,
    pub mask_ratio: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Self-critical updates after the joint phase.
    pub scst_steps: usize,
    /// Stop once this many updates have been applied, as if interrupted.
    pub stop_after: Option<usize>,
    pub exec: Execution,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            lambda: 0.7,
            mask_ratio: 0.3,
            steps: 2000,
            batch_size: 16,
            seed: 0,
            scst_steps: 0,
            stop_after: None,
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdcConfig {
    pub selection: Selection,
    pub sample_fraction: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Self-critical updates after calibration.
    pub scst_steps: usize,
    /// Stop once this many updates have been applied, as if interrupted.
    pub stop_after: Option<usize>,
    pub exec: Execution,
}

impl Default for CdcConfig {
    fn default() -> Self {
        Self {
            selection: Selection::threshold(0.2),
            sample_fraction: 1.0,
            total_steps: 1000,
            batch_size: 16,
            seed: 0,
            scst_steps: 0,
            stop_after: None,
            exec: Execution::default(),
        }
    }
}

fn last_step(total: usize, stop_after: Option<usize>) -> usize {
    stop_after.map_or(total, |s| s.min(total))
}

struct ItemOut {
    total: f64,
    parts: Components,
    grads: ParamGrads,
    masked: f64,
    len: usize,
}

struct Reduced {
    grads: ParamGrads,
    total: f64,
    parts: Components,
    masked_mean: f64,
    masked_frac: f64,
}

/// Batch mean, accumulated in item order.
fn reduce(items: Vec<ItemOut>) -> Reduced {
    let b = items.len().max(1) as f64;
    let mut r = Reduced {
        grads: ParamGrads::default(),
        total: 0.0,
        parts: Components::default(),
        masked_mean: 0.0,
        masked_frac: 0.0,
    };
    let (mut masked, mut len) = (0.0, 0usize);
    for it in &items {
        r.grads.merge(&it.grads);
        r.total += it.total;
        r.parts.add(&it.parts);
        masked += it.masked;
        len += it.len;
    }
    r.grads.scale(1.0 / b);
    r.total /= b;
    r.parts.scale(1.0 / b);
    r.masked_mean = masked / b;
    r.masked_frac = if len == 0 { 0.0 } else { masked / len as f64 };
    r
}

fn pick_batch(data: &[CaptionRecord], batch_size: usize, seed: u64, salt: u64, step: usize) -> Result<Vec<CaptionRecord>> {
    if data.is_empty() {
        return Err(Error::Degenerate("empty training set".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = derive_rng(seed, &[salt, step as u64]);
    Ok(index::sample(&mut rng, data.len(), batch_size.min(data.len())).into_iter().map(|i| data[i].clone()).collect())
}

fn diverged(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::Diverged { step, reason: format!("non-finite value in {op}") },
        e => e,
    }
}

fn check_finite(step: usize, r: &Reduced) -> Result<()> {
    if !r.total.is_finite() || !r.grads.is_finite() {
        return Err(Error::Diverged { step, reason: "loss or gradient is not finite".into() });
    }
    Ok(())
}

fn apply(bundle: &mut ModelBundle, opt: &mut Adam, grads: &ParamGrads, ids: &[ParamId]) {
    bundle.store.zero_grad();
    bundle.store.accumulate(grads);
    opt.step(&mut bundle.store, ids);
}

/// Mean joint-loss gradient over `batch` at update number `step`.
pub fn stage1_gradients(
    bundle: &ModelBundle,
    batch: &[CaptionRecord],
    cfg: &Stage1Config,
    step: usize,
) -> Result<(ParamGrads, LossReport)> {
    let items = par::try_map(cfg.exec, batch, |i, rec| -> Result<ItemOut> {
        let len = rec.references[0].len() + 1;
        let mut rng = derive_rng(cfg.seed, &[SALT_STAGE1, step as u64, i as u64 + 1]);
        let masked = sample_mask_positions(len, cfg.mask_ratio, &mut rng)?;
        let mut g = Graph::with_params(&bundle.store);
        let (loss, a, n) = stage1_sentence(&mut g, bundle, rec, &masked, cfg.lambda)?;
        let grads = g.backward(loss)?.param_grads(bundle.store.len());
        let parts = Components { aic_ce: g.value(a).item(), naic_ce: g.value(n).item(), ..Default::default() };
        Ok(ItemOut { total: g.value(loss).item(), parts, grads, masked: masked.len() as f64, len })
    })?;
    let r = reduce(items);
    check_finite(step, &r)?;
    let report = LossReport {
        step,
        kind: LossKind::Joint,
        total: r.total,
        components: r.parts,
        lambda: cfg.lambda,
        anneal_weight: 0.0,
        masked_mean: r.masked_mean,
        masked_frac: r.masked_frac,
    };
    Ok((r.grads, report))
}

/// One self-critical gradient: one sample per image, mean-reward
/// baseline, surrogate `−(r−b)·Σ log p` with the advantage held constant.
pub fn scst_step(
    bundle: &ModelBundle,
    batch: &[CaptionRecord],
    reward_fn: &RewardFn,
    seed: u64,
    step: usize,
    exec: Execution,
) -> Result<(ParamGrads, LossReport)> {
    let max_len = bundle.config.max_len;
    let samples = par::try_map(exec, batch, |i, rec| {
        let mut rng = derive_rng(seed, &[SALT_SCST, step as u64, i as u64 + 1]);
        bundle.sample_decode(&rec.features_tensor(), max_len, &mut rng)
    })?;
    let rewards: Vec<f64> = samples.iter().zip(batch).map(|(s, r)| reward_fn(s.words(), &r.references)).collect();
    let adv = scst_advantages(&rewards);
    let items = par::try_map(exec, batch, |i, rec| -> Result<ItemOut> {
        let mut g = Graph::with_params(&bundle.store);
        let loss = scst_surrogate(&mut g, bundle, &rec.features_tensor(), &samples[i].tokens, adv[i])?;
        let grads = g.backward(loss)?.param_grads(bundle.store.len());
        let total = g.value(loss).item();
        let parts = Components { scst_pseudo: total, ..Default::default() };
        Ok(ItemOut { total, parts, grads, masked: 0.0, len: samples[i].tokens.len() })
    })?;
    let r = reduce(items);
    check_finite(step, &r)?;
    let report = LossReport { step, kind: LossKind::Scst, total: r.total, components: r.parts, ..Default::default() };
    Ok((r.grads, report))
}

fn cider_reward(data: &[CaptionRecord]) -> Result<impl Fn(&[usize], &[Vec<usize>]) -> f64 + Sync> {
    let refs: Vec<Vec<Vec<usize>>> = data.iter().map(|r| r.references.clone()).collect();
    let scorer = CiderScorer::new(&refs)?;
    Ok(move |cand: &[usize], refs: &[Vec<usize>]| scorer.score(cand, refs).unwrap_or(0.0))
}

/// Stage 1: joint loss over the shared encoder and both decoders, then
/// optional self-critical updates of the causal side. Resumes from
/// `opt.steps_done()`. `on_step` sees the bundle after every update.
pub fn train_stage1(
    bundle: &mut ModelBundle,
    data: &[CaptionRecord],
    cfg: &Stage1Config,
    opt: &mut Adam,
    mut on_step: impl FnMut(&ModelBundle, &Adam, &LossReport) -> Result<()>,
) -> Result<Vec<LossReport>> {
    if !bundle.shared_encoder() {
        return Err(Error::Config("joint training needs the shared encoder".into()));
    }
    crate::objectives::loss_joint(0.0, 0.0, cfg.lambda)?;
    let all: Vec<ParamId> = bundle.store.iter().map(|(id, _)| id).collect();
    let student = bundle.student_param_ids();
    let reward = if cfg.scst_steps > 0 { Some(cider_reward(data)?) } else { None };
    let mut reports = Vec::new();
    let end = last_step(cfg.steps + cfg.scst_steps, cfg.stop_after);
    while opt.steps_done() < end {
        let step = opt.steps_done();
        let (grads, mut report, ids) = if step < cfg.steps {
            let batch = pick_batch(data, cfg.batch_size, cfg.seed, SALT_STAGE1, step)?;
            let (g, r) = stage1_gradients(bundle, &batch, cfg, step).map_err(diverged(step))?;
            (g, r, &all)
        } else {
            let batch = pick_batch(data, cfg.batch_size, cfg.seed, SALT_SCST, step)?;
            let reward = reward.as_ref().expect("built when scst_steps > 0");
            let (g, r) = scst_step(bundle, &batch, reward, cfg.seed, step, cfg.exec).map_err(diverged(step))?;
            (g, r, &student)
        };
        apply(bundle, opt, &grads, ids);
        report.step = step + 1;
        on_step(bundle, opt, &report)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Teacher-forced causal pass with the per-position confidences used for
/// selection.
pub struct StudentPass {
    pub log_probs: Var,
    pub states: Var,
    pub probs: Vec<f64>,
    pub argmax: Vec<usize>,
}

pub fn student_pass(g: &mut Graph, bundle: &ModelBundle, features: &Tensor, target: &[usize]) -> Result<StudentPass> {
    let out = bundle.aic_forward(g, features, &shift_right(target))?;
    let log_probs = g.log_softmax(out.logits)?;
    let lp = g.value(log_probs);
    let probs = target.iter().enumerate().map(|(t, &w)| lp.get2(t, w).exp()).collect();
    let argmax = (0..target.len())
        .map(|t| {
            let row = lp.row(t);
            let mut best = EOS;
            for (v, &x) in row.iter().enumerate() {
                if vocab::is_emittable(v) && x > row[best] {
                    best = v;
                }
            }
            best
        })
        .collect();
    Ok(StudentPass { log_probs, states: out.states, probs, argmax })
}

/// Calibration loss nodes for one sentence, averaged over its partitions.
#[derive(Debug, Clone, Copy)]
pub struct CdcTerms {
    pub total: Var,
    pub kl: Var,
    pub ia: Var,
    pub observed_ce: Var,
}

/// Teacher distributions and states at the masked positions, computed on a
/// separate detached graph.
fn teacher_targets(bundle: &ModelBundle, features: &Tensor, part: &MaskPartition, map: &NeuronMap) -> Result<(Tensor, super::ActivationTrace)> {
    let mut tg = Graph::detached(&bundle.store);
    let out = bundle.naic_forward(&mut tg, features, &apply_mask(&part.sentence, &part.masked))?;
    let sm = tg.softmax(out.logits)?;
    let probs = tg.value(sm);
    let mut q = Vec::with_capacity(part.masked.len() * probs.cols());
    for &t in &part.masked {
        q.extend_from_slice(probs.row(t));
    }
    let q = Tensor::matrix(part.masked.len(), probs.cols(), q)?;
    let trace = get_activations(&mut tg, out.states, &map.teachers(), &part.masked, TraceSource::Teacher)?;
    Ok((q, trace))
}

/// `w·(kl + ia) + observed_ce` for each partition, averaged.
pub fn cdc_sentence(
    g: &mut Graph,
    bundle: &ModelBundle,
    features: &Tensor,
    pass: &StudentPass,
    partitions: &[MaskPartition],
    map: &NeuronMap,
    anneal_w: f64,
) -> Result<CdcTerms> {
    if partitions.is_empty() {
        return Err(Error::Degenerate("no mask partition".into()));
    }
    let mut terms = Vec::with_capacity(partitions.len());
    for part in partitions {
        let (kl, ia) = if part.masked.is_empty() {
            (g.zero(), g.zero())
        } else {
            let (q, teacher) = teacher_targets(bundle, features, part, map)?;
            let kl = loss_kl_unconfident(g, pass.log_probs, &q, &part.masked)?;
            let student = get_activations(g, pass.states, &map.students(), &part.masked, TraceSource::Student)?;
            (kl, loss_interchange_alignment(g, &student, &teacher, map)?)
        };
        let ce = observed_ce(g, pass.log_probs, &part.sentence, &part.observed)?;
        let total = cdc_graph(g, kl, ia, ce, anneal_w)?;
        terms.push(CdcTerms { total, kl, ia, observed_ce: ce });
    }
    if terms.len() == 1 {
        return Ok(terms[0]);
    }
    let inv = 1.0 / terms.len() as f64;
    let mut mean = |f: fn(&CdcTerms) -> Var| -> Result<Var> {
        let vs: Vec<Var> = terms.iter().map(f).collect();
        let s = g.add_all(&vs)?;
        Ok(g.scale(s, inv)?)
    };
    Ok(CdcTerms { total: mean(|t| t.total)?, kl: mean(|t| t.kl)?, ia: mean(|t| t.ia)?, observed_ce: mean(|t| t.observed_ce)? })
}

/// Mean calibration gradient over `batch`. Fails if any teacher parameter
/// received a gradient.
pub fn cdc_gradients(
    bundle: &ModelBundle,
    batch: &[CaptionRecord],
    cfg: &CdcConfig,
    map: &NeuronMap,
    anneal_w: f64,
    step: usize,
) -> Result<(ParamGrads, LossReport)> {
    let items = par::try_map(cfg.exec, batch, |i, rec| -> Result<ItemOut> {
        let target = rec.target();
        let features = rec.features_tensor();
        let mut g = Graph::with_params(&bundle.store);
        let pass = student_pass(&mut g, bundle, &features, &target)?;
        let mut rng = derive_rng(cfg.seed, &[SALT_CDC, step as u64, i as u64 + 1]);
        let parts = select_masked_set(&pass.probs, &target, &pass.argmax, &cfg.selection, &mut rng)?;
        let terms = cdc_sentence(&mut g, bundle, &features, &pass, &parts, map, anneal_w)?;
        let grads = g.backward(terms.total)?.param_grads(bundle.store.len());
        let parts_v = Components {
            kl: g.value(terms.kl).item(),
            ia: g.value(terms.ia).item(),
            observed_ce: g.value(terms.observed_ce).item(),
            ..Default::default()
        };
        let masked = parts.iter().map(|p| p.masked.len()).sum::<usize>() as f64 / parts.len() as f64;
        Ok(ItemOut { total: g.value(terms.total).item(), parts: parts_v, grads, masked, len: target.len() })
    })?;
    let r = reduce(items);
    check_finite(step, &r)?;
    if let Some(id) = bundle.teacher_param_ids().into_iter().find(|&id| r.grads.get(id).is_some()) {
        return Err(Error::FrozenViolation(format!("gradient reached {}", bundle.store.get(id).name)));
    }
    let report = LossReport {
        step,
        kind: LossKind::Cdc,
        total: r.total,
        components: r.parts,
        lambda: 0.0,
        anneal_weight: anneal_w,
        masked_mean: r.masked_mean,
        masked_frac: r.masked_frac,
    };
    Ok((r.grads, report))
}

fn check_teacher_ready(bundle: &ModelBundle) -> Result<()> {
    if bundle.shared_encoder() {
        return Err(Error::Config("calibration needs a separate teacher encoder".into()));
    }
    if !bundle.teacher_frozen() {
        return Err(Error::FrozenViolation("teacher parameters are not flagged frozen".into()));
    }
    Ok(())
}

/// One calibration update of the student (encoder copy and causal decoder).
/// Gradient buffers are left on the store for inspection.
pub fn cdc_step(
    bundle: &mut ModelBundle,
    batch: &[CaptionRecord],
    cfg: &CdcConfig,
    map: &NeuronMap,
    anneal_w: f64,
    step: usize,
    opt: &mut Adam,
) -> Result<LossReport> {
    check_teacher_ready(bundle)?;
    let teacher = bundle.teacher_param_ids();
    let before = bundle.serialize_params(&teacher);
    let (grads, report) = cdc_gradients(bundle, batch, cfg, map, anneal_w, step).map_err(diverged(step))?;
    let student = bundle.student_param_ids();
    apply(bundle, opt, &grads, &student);
    if bundle.serialize_params(&teacher) != before {
        return Err(Error::FrozenViolation("teacher parameters changed during an update".into()));
    }
    Ok(report)
}

/// Weight of the distilled terms at calibration update `step` of `total`:
/// 1 at the first update, 0 at the last.
fn schedule(step: usize, total: usize) -> f64 {
    if total <= 1 {
        1.0
    } else {
        crate::objectives::anneal_weight(step, total - 1)
    }
}

/// Stage 2. Splits the encoders (teacher keeps a frozen copy), freezes the
/// mask-predict side, and runs `total_steps` calibration updates followed by
/// optional self-critical updates. With nothing to do the bundle is left
/// untouched.
pub fn train_cdc(
    bundle: &mut ModelBundle,
    data: &[CaptionRecord],
    cfg: &CdcConfig,
    opt: &mut Adam,
    mut on_step: impl FnMut(&ModelBundle, &Adam, &LossReport) -> Result<()>,
) -> Result<Vec<LossReport>> {
    let end = last_step(cfg.total_steps + cfg.scst_steps, cfg.stop_after);
    if opt.steps_done() >= end {
        return Ok(Vec::new());
    }
    bundle.split_encoders();
    bundle.set_teacher_frozen(true);
    let teacher = bundle.teacher_param_ids();
    let before = bundle.serialize_params(&teacher);
    let student = bundle.student_param_ids();
    let reward = if cfg.scst_steps > 0 { Some(cider_reward(data)?) } else { None };
    let mut reports = Vec::new();
    while opt.steps_done() < end {
        let step = opt.steps_done();
        let mut report = if step < cfg.total_steps {
            let batch = pick_batch(data, cfg.batch_size, cfg.seed, SALT_CDC, step)?;
            let mut rng = derive_rng(cfg.seed, &[SALT_MAP, step as u64]);
            let map = sample_neuron_map(bundle.config.d_model, cfg.sample_fraction, &mut rng)?;
            cdc_step(bundle, &batch, cfg, &map, schedule(step, cfg.total_steps), step, opt)?
        } else {
            let batch = pick_batch(data, cfg.batch_size, cfg.seed, SALT_SCST, step)?;
            let reward = reward.as_ref().expect("built when scst_steps > 0");
            let (grads, r) = scst_step(bundle, &batch, reward, cfg.seed, step, cfg.exec).map_err(diverged(step))?;
            apply(bundle, opt, &grads, &student);
            r
        };
        report.step = step + 1;
        on_step(bundle, opt, &report)?;
        reports.push(report);
    }
    if bundle.serialize_params(&teacher) != before {
        return Err(Error::FrozenViolation("teacher parameters changed during calibration".into()));
    }
    Ok(reports)
}

/// Calibration run plus confidence logs on `eval` before and after.
pub struct CdcOutcome {
    pub reports: Vec<LossReport>,
    pub before: PredictionLog,
    pub after: PredictionLog,
}

pub fn calibrate(
    bundle: &mut ModelBundle,
    train: &[CaptionRecord],
    eval: &[CaptionRecord],
    cfg: &CdcConfig,
    opt: &mut Adam,
) -> Result<CdcOutcome> {
    let before = prediction_log(bundle, eval, "before", "eval", cfg.exec)?;
    let reports = train_cdc(bundle, train, cfg, opt, |_, _, _| Ok(()))?;
    let after = prediction_log(bundle, eval, "after", "eval", cfg.exec)?;
    Ok(CdcOutcome { reports, before, after })
}
