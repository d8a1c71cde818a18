//! The subcommands. Each returns the lines it wants printed; every file it
//! writes is a function of the config alone, except the `*.meta.txt`
//! timestamp sidecar.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use lookahead::analysis::{
    histogram_csv, interval_table, position_profile, probability_histogram, profile_csv, sweep_report, IntervalTable,
    PredictionLog,
};
use lookahead::calibration::{self, Adam, CdcConfig, MaskStrategy};
use lookahead::data::{load_corpus, save_corpus, CaptionRecord, Grammar};
use lookahead::metrics::{evaluate, MetricTable};
use lookahead::model::{Checkpoint, ModelBundle};
use lookahead::objectives::LossReport;
use lookahead::{par, Error, Result};

use crate::config::RunConfig;

const STAGE_KEY: &str = "run.stage";
const TOTAL_KEY: &str = "run.total_steps";

/// Failure of a command: a core error, or bad command-line usage.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => e.kind(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    GenData { force: bool },
    TrainJoint { resume: bool, stop_after: Option<usize> },
    TrainCdc { resume: bool, stop_after: Option<usize> },
    Evaluate { checkpoint: Option<PathBuf>, tag: String },
    Sweep { param: String, values: Vec<f64> },
    AblateMasks,
    Analyze { before: Option<PathBuf>, after: Option<PathBuf> },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainJoint { .. } => "train-joint",
            Command::TrainCdc { .. } => "train-cdc",
            Command::Evaluate { .. } => "evaluate",
            Command::Sweep { .. } => "sweep",
            Command::AblateMasks => "ablate-masks",
            Command::Analyze { .. } => "analyze",
        }
    }
}

/// Runs `cmd` and writes the timestamp sidecar. Returns the report lines.
pub fn run(cfg: &RunConfig, cmd: &Command) -> CliResult<Vec<String>> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let out = match cmd {
        Command::GenData { force } => gen_data(cfg, *force)?,
        Command::TrainJoint { resume, stop_after } => train_joint(cfg, *resume, *stop_after)?,
        Command::TrainCdc { resume, stop_after } => train_cdc(cfg, *resume, *stop_after)?,
        Command::Evaluate { checkpoint, tag } => evaluate_cmd(cfg, checkpoint.as_deref(), tag)?,
        Command::Sweep { param, values } => sweep(cfg, param, values)?,
        Command::AblateMasks => ablate_masks(cfg)?,
        Command::Analyze { before, after } => analyze(cfg, before.as_deref(), after.as_deref())?,
    };
    write(&cfg.log_dir.join(format!("{}.config", cmd.name())), &cfg.serialize())?;
    let unix = |t: SystemTime| t.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = format!(
        "command = {}\nstarted_unix = {}\nfinished_unix = {}\nelapsed_ms = {}\nversion = {}\n",
        cmd.name(),
        unix(started),
        unix(SystemTime::now()),
        clock.elapsed().as_millis(),
        env!("CARGO_PKG_VERSION"),
    );
    write(&cfg.log_dir.join(format!("{}.meta.txt", cmd.name())), &meta)?;
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(path, text).map_err(Error::io(path))
}

pub fn split_path(cfg: &RunConfig, split: &str) -> PathBuf {
    cfg.data_dir.join(format!("{split}.jsonl"))
}

pub fn vocab_path(cfg: &RunConfig) -> PathBuf {
    cfg.data_dir.join("vocab.txt")
}

pub fn stage1_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint_dir.join("stage1.ckpt")
}

pub fn cdc_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint_dir.join("cdc.ckpt")
}

fn gen_data(cfg: &RunConfig, force: bool) -> CliResult<Vec<String>> {
    let grammar = Grammar::new(cfg.task_spec())?;
    let targets: Vec<PathBuf> =
        ["train", "val", "test"].iter().map(|s| split_path(cfg, s)).chain([vocab_path(cfg)]).collect();
    if !force {
        if let Some(p) = targets.iter().find(|p| p.exists()) {
            return Err(Error::Exists(p.clone()).into());
        }
    }
    let corpus = grammar.generate();
    fs::create_dir_all(&cfg.data_dir).map_err(Error::io(&cfg.data_dir))?;
    for (name, records) in [("train", &corpus.train), ("val", &corpus.val), ("test", &corpus.test)] {
        save_corpus(records, &split_path(cfg, name))?;
    }
    let vocab: String = (0..grammar.vocab_size()).map(|i| format!("{}\n", grammar.word(i))).collect();
    write(&vocab_path(cfg), &vocab)?;
    Ok(vec![format!(
        "wrote {} train / {} val / {} test records, vocabulary {} to {}",
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len(),
        grammar.vocab_size(),
        cfg.data_dir.display()
    )])
}

fn read_vocab(cfg: &RunConfig) -> Result<Vec<String>> {
    let path = vocab_path(cfg);
    if !path.exists() {
        return Err(Error::Missing(path));
    }
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn load_split(cfg: &RunConfig, split: &str, vocab: usize) -> Result<Vec<CaptionRecord>> {
    let records = load_corpus(&split_path(cfg, split))?;
    for (i, r) in records.iter().enumerate() {
        r.validate(Some(vocab)).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
    }
    if records.is_empty() {
        return Err(Error::Degenerate(format!("{split} split is empty")));
    }
    Ok(records)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    Checkpoint::load(path)
}

fn save_state(path: &Path, bundle: &ModelBundle, opt: &Adam, stage: &str, total: usize) -> Result<()> {
    let mut ck = bundle.to_checkpoint();
    opt.write_state(&bundle.store, &mut ck);
    ck.meta.insert(STAGE_KEY.into(), stage.into());
    ck.meta.insert(TOTAL_KEY.into(), total.to_string());
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    ck.save(path)
}

fn log_text(rows: &[String]) -> String {
    let mut s = format!("{}\n", LossReport::CSV_HEADER);
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    s
}

/// Rows of an existing loss log up to and including `steps_done`.
fn resume_rows(path: &Path, steps_done: usize) -> Result<Vec<String>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let mut lines = text.lines();
    if lines.next() != Some(LossReport::CSV_HEADER) {
        return Err(Error::Parse { line: 1, msg: "loss log header does not match".into() });
    }
    let rows: Vec<String> = lines.take(steps_done).map(str::to_string).collect();
    if rows.len() != steps_done {
        return Err(Error::Checkpoint(format!("{} holds {} rows, checkpoint is at step {steps_done}", path.display(), rows.len())));
    }
    Ok(rows)
}

/// Drives one stage with periodic checkpoints and the loss log. On
/// divergence the untouched (last good) state is checkpointed before the
/// error is returned.
fn drive(
    cfg: &RunConfig,
    stage: &str,
    total: usize,
    ck_path: &Path,
    log_path: &Path,
    bundle: &mut ModelBundle,
    opt: &mut Adam,
    mut rows: Vec<String>,
    train: impl FnOnce(&mut ModelBundle, &mut Adam, &mut dyn FnMut(&ModelBundle, &Adam, &LossReport) -> Result<()>) -> Result<Vec<LossReport>>,
) -> Result<()> {
    let every = cfg.checkpoint_every;
    let mut on_step = |b: &ModelBundle, o: &Adam, r: &LossReport| -> Result<()> {
        rows.push(r.csv_row());
        if every > 0 && r.step % every == 0 {
            save_state(ck_path, b, o, stage, total)?;
            write(log_path, &log_text(&rows))?;
            log::info!("{stage}: step {} of {total}, loss {:.4}", r.step, r.total);
        }
        Ok(())
    };
    let result = train(bundle, opt, &mut on_step);
    drop(on_step);
    save_state(ck_path, bundle, opt, stage, total)?;
    write(log_path, &log_text(&rows))?;
    result.map(|_| ())
}

fn metrics_csv(rows: &[(String, MetricTable)], label: &str) -> String {
    let mut s = format!("{label},{}\n", MetricTable::CSV_HEADER);
    for (name, m) in rows {
        let _ = writeln!(s, "{name},{}", m.csv_row());
    }
    s
}

fn train_joint(cfg: &RunConfig, resume: bool, stop_after: Option<usize>) -> CliResult<Vec<String>> {
    let vocab = read_vocab(cfg)?;
    let train = load_split(cfg, "train", vocab.len())?;
    let eval = load_split(cfg, &cfg.eval_split, vocab.len())?;
    let ck_path = stage1_checkpoint(cfg);
    let log_path = cfg.log_dir.join("stage1_loss.csv");
    let s1 = calibration::Stage1Config { stop_after, ..cfg.stage1() };
    let total = s1.steps + s1.scst_steps;
    let mut opt = Adam::new(cfg.stage1_lr, cfg.stage1_warmup);
    let (mut bundle, rows) = if resume {
        let ck = load_checkpoint(&ck_path)?;
        let b = ModelBundle::from_checkpoint(&ck)?;
        opt.read_state(&b.store, &ck)?;
        let rows = resume_rows(&log_path, opt.steps_done())?;
        (b, rows)
    } else {
        (ModelBundle::new(cfg.model_config(vocab.len()))?, Vec::new())
    };
    let start = opt.steps_done();
    drive(cfg, "stage1", total, &ck_path, &log_path, &mut bundle, &mut opt, rows, |b, o, cb| {
        calibration::train_stage1(b, &train, &s1, o, cb)
    })?;
    let mut out = vec![format!("stage 1: steps {start}..{} of {total}", opt.steps_done())];
    if opt.steps_done() < total {
        out.push(format!("stopped early; resume with --resume from {}", ck_path.display()));
        return Ok(out);
    }
    let (m, log) = evaluate(&bundle, &eval, cfg.exec())?;
    let log = PredictionLog { model_tag: "stage1".into(), corpus_tag: cfg.eval_split.clone(), ..log };
    log.save(&cfg.log_dir.join("stage1_predictions.csv"))?;
    write(&cfg.log_dir.join("stage1_metrics.csv"), &metrics_csv(&[("stage1".into(), m.clone())], "model"))?;
    out.push(format!("{} {}: {}", cfg.eval_split, MetricTable::CSV_HEADER, m.csv_row()));
    Ok(out)
}

/// Calibration from the stage-1 checkpoint with `cdc`; returns the bundle,
/// the before/after logs and metrics on the eval split.
struct CdcRun {
    bundle: ModelBundle,
    before: (MetricTable, PredictionLog),
    after: (MetricTable, PredictionLog),
}

fn run_cdc(cfg: &RunConfig, cdc: &CdcConfig, train: &[CaptionRecord], eval: &[CaptionRecord]) -> Result<CdcRun> {
    let ck = load_checkpoint(&stage1_checkpoint(cfg))?;
    let mut bundle = ModelBundle::from_checkpoint(&ck)?;
    let before = evaluate(&bundle, eval, cdc.exec)?;
    let mut opt = Adam::new(cfg.cdc_lr, cfg.cdc_warmup);
    calibration::train_cdc(&mut bundle, train, cdc, &mut opt, |_, _, _| Ok(()))?;
    let after = evaluate(&bundle, eval, cdc.exec)?;
    Ok(CdcRun { bundle, before, after })
}

fn interval_summary(t: &IntervalTable) -> String {
    format!("{}below 0.5: {:+.4} points, at or above 0.5: {:+.4} points\n", t.to_csv(), t.low_delta(), t.high_delta())
}

fn train_cdc(cfg: &RunConfig, resume: bool, stop_after: Option<usize>) -> CliResult<Vec<String>> {
    let vocab = read_vocab(cfg)?;
    let train = load_split(cfg, "train", vocab.len())?;
    let eval = load_split(cfg, &cfg.eval_split, vocab.len())?;
    let stage1 = load_checkpoint(&stage1_checkpoint(cfg))?;
    let ck_path = cdc_checkpoint(cfg);
    let log_path = cfg.log_dir.join("cdc_loss.csv");
    let cdc = CdcConfig { stop_after, ..cfg.cdc() };
    let total = cdc.total_steps + cdc.scst_steps;
    let mut opt = Adam::new(cfg.cdc_lr, cfg.cdc_warmup);
    let (mut bundle, rows) = if resume {
        let ck = load_checkpoint(&ck_path)?;
        let b = ModelBundle::from_checkpoint(&ck)?;
        opt.read_state(&b.store, &ck)?;
        (b, resume_rows(&log_path, opt.steps_done())?)
    } else {
        (ModelBundle::from_checkpoint(&stage1)?, Vec::new())
    };
    let start = opt.steps_done();
    drive(cfg, "cdc", total, &ck_path, &log_path, &mut bundle, &mut opt, rows, |b, o, cb| {
        calibration::train_cdc(b, &train, &cdc, o, cb)
    })?;
    let mut out = vec![format!("calibration: steps {start}..{} of {total}", opt.steps_done())];
    if opt.steps_done() < total {
        out.push(format!("stopped early; resume with --resume from {}", ck_path.display()));
        return Ok(out);
    }
    let base = ModelBundle::from_checkpoint(&stage1)?;
    let (m0, before) = evaluate(&base, &eval, cfg.exec())?;
    let (m1, after) = evaluate(&bundle, &eval, cfg.exec())?;
    let before = PredictionLog { model_tag: "stage1".into(), corpus_tag: cfg.eval_split.clone(), ..before };
    let after = PredictionLog { model_tag: "cdc".into(), corpus_tag: cfg.eval_split.clone(), ..after };
    before.save(&cfg.log_dir.join("cdc_before.csv"))?;
    after.save(&cfg.log_dir.join("cdc_after.csv"))?;
    let table = interval_table(&before, &after)?;
    write(&cfg.log_dir.join("cdc_intervals.csv"), &table.to_csv())?;
    let metrics = [("stage1".to_string(), m0.clone()), ("cdc".to_string(), m1.clone())];
    write(&cfg.log_dir.join("cdc_metrics.csv"), &metrics_csv(&metrics, "model"))?;
    let summary = format!(
        "calibration on {} ({} strategy, epsilon {})\n{}\n{}",
        cfg.eval_split,
        cfg.mask_strategy,
        cfg.epsilon,
        metrics_csv(&metrics, "model"),
        interval_summary(&table)
    );
    write(&cfg.log_dir.join("cdc_summary.txt"), &summary)?;
    out.extend(summary.lines().map(str::to_string));
    Ok(out)
}

fn evaluate_cmd(cfg: &RunConfig, checkpoint: Option<&Path>, tag: &str) -> CliResult<Vec<String>> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cdc_checkpoint(cfg));
    let ck = load_checkpoint(&path)?;
    let bundle = ModelBundle::from_checkpoint(&ck)?;
    let vocab = read_vocab(cfg)?;
    let eval = load_split(cfg, &cfg.eval_split, vocab.len())?;
    let (m, log) = evaluate(&bundle, &eval, cfg.exec())?;
    let log = PredictionLog { model_tag: tag.into(), corpus_tag: cfg.eval_split.clone(), ..log };
    write(&cfg.log_dir.join(format!("{tag}_metrics.csv")), &metrics_csv(&[(tag.into(), m.clone())], "model"))?;
    log.save(&cfg.log_dir.join(format!("{tag}_predictions.csv")))?;
    Ok(vec![format!("{} on {}: {}", path.display(), cfg.eval_split, m.csv_row())])
}

/// One isolated run per value, seeded `seed + index`, scored by CIDEr on
/// the validation split.
fn sweep(cfg: &RunConfig, param: &str, values: &[f64]) -> CliResult<Vec<String>> {
    if values.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    if param != "lambda" && param != "epsilon" {
        return Err(CliError::Usage(format!("cannot sweep {param:?}; use lambda or epsilon")));
    }
    let vocab = read_vocab(cfg)?;
    let train = load_split(cfg, "train", vocab.len())?;
    let val = load_split(cfg, "val", vocab.len())?;
    let runs: Vec<(usize, f64)> = values.iter().copied().enumerate().collect();
    let scores = par::try_map(cfg.exec(), &runs, |_, &(i, v)| -> Result<(f64, f64)> {
        let mut c = cfg.clone();
        c.seed = cfg.seed + i as u64;
        c.set(param, &v.to_string())?;
        c.validate()?;
        let bundle = if param == "lambda" {
            let mut b = ModelBundle::new(c.model_config(vocab.len()))?;
            let mut opt = Adam::new(c.stage1_lr, c.stage1_warmup);
            calibration::train_stage1(&mut b, &train, &c.stage1(), &mut opt, |_, _, _| Ok(()))?;
            b
        } else {
            run_cdc(&c, &c.cdc(), &train, &val)?.bundle
        };
        Ok((v, evaluate(&bundle, &val, c.exec())?.0.cider))
    })?;
    let report = sweep_report(&scores)?;
    write(&cfg.log_dir.join(format!("sweep_{param}.csv")), &report.to_csv(param))?;
    let best = report.rows.iter().find(|r| r.0 == report.best).map_or(f64::NAN, |r| r.1);
    let summary = format!("best {param} = {} (val CIDEr {best:.6})\n", report.best);
    write(&cfg.log_dir.join(format!("sweep_{param}_summary.txt")), &summary)?;
    let mut out: Vec<String> = report.to_csv(param).lines().map(str::to_string).collect();
    out.push(summary.trim_end().to_string());
    Ok(out)
}

/// All five strategies from the same stage-1 checkpoint with the same seed.
fn ablate_masks(cfg: &RunConfig) -> CliResult<Vec<String>> {
    let vocab = read_vocab(cfg)?;
    let train = load_split(cfg, "train", vocab.len())?;
    let eval = load_split(cfg, &cfg.eval_split, vocab.len())?;
    let rows = par::try_map(cfg.exec(), &MaskStrategy::ALL, |_, &s| -> Result<(MaskStrategy, CdcRun)> {
        let mut c = cfg.clone();
        c.mask_strategy = s;
        Ok((s, run_cdc(&c, &c.cdc(), &train, &eval)?))
    })?;
    let mut csv = format!("strategy,{},high_delta\n", MetricTable::CSV_HEADER);
    for (s, run) in &rows {
        let t = interval_table(&run.before.1, &run.after.1)?;
        let _ = writeln!(csv, "{s},{},{}", run.after.0.csv_row(), t.high_delta());
    }
    write(&cfg.log_dir.join("ablate_masks.csv"), &csv)?;
    Ok(csv.lines().map(str::to_string).collect())
}

fn analyze(cfg: &RunConfig, before: Option<&Path>, after: Option<&Path>) -> CliResult<Vec<String>> {
    let before_path = before.map(Path::to_path_buf).unwrap_or_else(|| cfg.log_dir.join("cdc_before.csv"));
    let log = PredictionLog::load(&before_path, "before", &cfg.eval_split)?;
    let hist = probability_histogram(&log, cfg.histogram_width)?;
    let profile = position_profile(&log, cfg.profile_buckets)?;
    write(&cfg.log_dir.join("analysis_histogram.csv"), &histogram_csv(&hist))?;
    write(&cfg.log_dir.join("analysis_profile.csv"), &profile_csv(&profile))?;
    let mut summary = format!(
        "{} entries from {}\nmean probability {:.6}\nbelow 0.5: {:.4}%\n",
        log.entries.len(),
        before_path.display(),
        log.mean_prob().unwrap_or(0.0),
        100.0 * log.fraction_below(0.5)
    );
    let shown = |v: &Option<f64>| v.map_or("absent".to_string(), |x| format!("{x:.6}"));
    let _ = writeln!(
        summary,
        "profile first non-empty bucket {}, last non-empty bucket {}",
        shown(&profile.iter().flatten().next().copied()),
        shown(&profile.iter().rev().flatten().next().copied())
    );
    let after_path = after.map(Path::to_path_buf).or_else(|| {
        let p = cfg.log_dir.join("cdc_after.csv");
        (before.is_none() && p.exists()).then_some(p)
    });
    if let Some(p) = after_path {
        let after = PredictionLog::load(&p, "after", &cfg.eval_split)?;
        let t = interval_table(&log, &after)?;
        write(&cfg.log_dir.join("analysis_intervals.csv"), &t.to_csv())?;
        summary.push_str(&interval_summary(&t));
    }
    write(&cfg.log_dir.join("analysis_summary.txt"), &summary)?;
    Ok(summary.lines().map(str::to_string).collect())
}
