//! Confidence analyses over per-position ground-truth probabilities.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One teacher-forced position. `position` is 1-indexed and
/// `position <= length`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub record_id: String,
    pub position: usize,
    pub length: usize,
    pub gt_token: usize,
    pub prob: f64,
    pub argmax_token: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionLog {
    pub model_tag: String,
    pub corpus_tag: String,
    pub entries: Vec<PredictionEntry>,
}

impl PredictionLog {
    pub fn new(model_tag: impl Into<String>, corpus_tag: impl Into<String>, entries: Vec<PredictionEntry>) -> Self {
        Self { model_tag: model_tag.into(), corpus_tag: corpus_tag.into(), entries }
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if !(0.0..=1.0).contains(&e.prob) {
                return Err(Error::Analysis(format!("probability {} outside [0,1] for {}", e.prob, e.record_id)));
            }
            if e.position == 0 || e.position > e.length {
                return Err(Error::Analysis(format!("position {} outside 1..={} for {}", e.position, e.length, e.record_id)));
            }
        }
        Ok(())
    }

    pub fn mean_prob(&self) -> Option<f64> {
        (!self.entries.is_empty()).then(|| self.entries.iter().map(|e| e.prob).sum::<f64>() / self.entries.len() as f64)
    }

    /// Fraction of entries with probability strictly below `p`.
    pub fn fraction_below(&self, p: f64) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().filter(|e| e.prob < p).count() as f64 / self.entries.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.entries.is_empty() {
            w.write_record(["record_id", "position", "length", "gt_token", "prob", "argmax_token"]).expect("in-memory write");
        }
        for e in &self.entries {
            w.serialize(e).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(Error::io(path))
    }

    /// Tags are not stored in the CSV; the caller names them.
    pub fn load(path: &Path, model_tag: &str, corpus_tag: &str) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
        let mut entries = Vec::new();
        for (i, row) in r.deserialize().enumerate() {
            let e: PredictionEntry = row.map_err(|e| Error::Parse { line: i + 2, msg: e.to_string() })?;
            entries.push(e);
        }
        let log = Self::new(model_tag, corpus_tag, entries);
        log.validate()?;
        Ok(log)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub percent: f64,
}

fn bin_count(bin_width: f64) -> Result<usize> {
    if !(bin_width > 0.0 && bin_width <= 1.0) {
        return Err(Error::Analysis(format!("bin width {bin_width} outside (0,1]")));
    }
    let n = (1.0 / bin_width).round();
    if (n * bin_width - 1.0).abs() > 1e-9 {
        return Err(Error::Analysis(format!("bin width {bin_width} does not divide 1")));
    }
    Ok(n as usize)
}

/// Percentage of entries per `[k·w, (k+1)·w)` bin; the last bin is closed.
pub fn probability_histogram(log: &PredictionLog, bin_width: f64) -> Result<Vec<HistogramBin>> {
    let n = bin_count(bin_width)?;
    if log.entries.is_empty() {
        return Err(Error::Analysis("empty prediction log".into()));
    }
    let mut counts = vec![0usize; n];
    for e in &log.entries {
        // The small slack keeps values like 0.3 (= 2.9999999999999996 / 10)
        // in the bin their decimal form names.
        let k = ((e.prob * n as f64 + 1e-9).floor() as usize).min(n - 1);
        counts[k] += 1;
    }
    let total = log.entries.len() as f64;
    Ok(counts
        .iter()
        .enumerate()
        .map(|(k, &c)| HistogramBin { lo: k as f64 / n as f64, hi: (k + 1) as f64 / n as f64, percent: 100.0 * c as f64 / total })
        .collect())
}

/// Mean probability per normalised-position bucket `⌊(t−1)/|S| · n⌋`.
/// Buckets nobody falls into are `None`.
pub fn position_profile(log: &PredictionLog, n_buckets: usize) -> Result<Vec<Option<f64>>> {
    if n_buckets < 2 {
        return Err(Error::Analysis("need at least 2 buckets".into()));
    }
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); n_buckets];
    for e in &log.entries {
        if e.position == 0 || e.position > e.length {
            return Err(Error::Analysis(format!("position {} outside 1..={}", e.position, e.length)));
        }
        buckets[(e.position - 1) * n_buckets / e.length].push(e.prob);
    }
    Ok(buckets
        .into_iter()
        .map(|mut v| {
            // Sorted summation makes the result independent of entry order.
            v.sort_by(f64::total_cmp);
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect())
}

pub const INTERVAL_EDGES: [f64; 7] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalTable {
    pub before: Vec<f64>,
    pub after: Vec<f64>,
    pub delta: Vec<f64>,
}

fn interval_percentages(log: &PredictionLog) -> Vec<f64> {
    let last = INTERVAL_EDGES.len() - 2;
    let mut counts = vec![0usize; last + 1];
    for e in &log.entries {
        let k = (0..last).find(|&k| e.prob < INTERVAL_EDGES[k + 1]).unwrap_or(last);
        counts[k] += 1;
    }
    let total = log.entries.len().max(1) as f64;
    counts.iter().map(|&c| 100.0 * c as f64 / total).collect()
}

/// Percentages in `[0,.1) … [.4,.5) [.5,1]` before and after, plus deltas.
pub fn interval_table(before: &PredictionLog, after: &PredictionLog) -> Result<IntervalTable> {
    if before.entries.is_empty() {
        return Err(Error::Analysis("empty prediction log".into()));
    }
    let keys = |l: &PredictionLog| l.entries.iter().map(|e| (e.record_id.clone(), e.position)).collect::<BTreeSet<_>>();
    if before.corpus_tag != after.corpus_tag || keys(before) != keys(after) {
        return Err(Error::Analysis(format!(
            "logs cover different corpora ({:?} vs {:?})",
            before.corpus_tag, after.corpus_tag
        )));
    }
    let b = interval_percentages(before);
    let a = interval_percentages(after);
    let delta = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    Ok(IntervalTable { before: b, after: a, delta })
}

impl IntervalTable {
    /// Share of mass below 0.5 after minus before.
    pub fn low_delta(&self) -> f64 {
        self.delta[..self.delta.len() - 1].iter().sum()
    }

    pub fn high_delta(&self) -> f64 {
        self.delta[self.delta.len() - 1]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("row");
        for k in 0..self.before.len() {
            let close = if k + 1 == self.before.len() { ']' } else { ')' };
            let _ = write!(s, ",[{}-{}{close}", INTERVAL_EDGES[k], INTERVAL_EDGES[k + 1]);
        }
        s.push('\n');
        for (name, row) in [("before", &self.before), ("after", &self.after), ("delta", &self.delta)] {
            s.push_str(name);
            for v in row.iter() {
                let _ = write!(s, ",{v:.4}");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    /// `(parameter, score)` sorted by parameter.
    pub rows: Vec<(f64, f64)>,
    pub best: f64,
}

/// Best parameter by score; ties go to the smaller parameter.
pub fn sweep_report(results: &[(f64, f64)]) -> Result<SweepReport> {
    if results.len() < 2 {
        return Err(Error::Analysis("a sweep needs at least two points".into()));
    }
    let mut rows = results.to_vec();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = rows[0];
    for &r in &rows[1..] {
        if r.1 > best.1 {
            best = r;
        }
    }
    Ok(SweepReport { rows, best: best.0 })
}

impl SweepReport {
    pub fn to_csv(&self, param: &str) -> String {
        let mut s = format!("{param},cider\n");
        for (p, c) in &self.rows {
            let _ = writeln!(s, "{p},{c}");
        }
        s
    }
}

/// CSV for a histogram: `lo,hi,percent`.
pub fn histogram_csv(bins: &[HistogramBin]) -> String {
    let mut s = String::from("lo,hi,percent\n");
    for b in bins {
        let _ = writeln!(s, "{:.2},{:.2},{:.4}", b.lo, b.hi, b.percent);
    }
    s
}

/// CSV for a position profile: `bucket,mean_prob` with empty cells for
/// absent buckets.
pub fn profile_csv(profile: &[Option<f64>]) -> String {
    let mut s = String::from("bucket,mean_prob\n");
    for (k, v) in profile.iter().enumerate() {
        match v {
            Some(v) => writeln!(s, "{k},{v:.6}"),
            None => writeln!(s, "{k},"),
        }
        .expect("string write");
    }
    s
}
