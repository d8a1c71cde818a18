//! Flat `key = value` run configuration.
//!
//! Precedence is command-line flag, then config file, then default. Every
//! key is always serialized, so `parse(serialize(c)) == c`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lookahead::calibration::{CdcConfig, MaskStrategy, Selection, Stage1Config};
use lookahead::data::SyntheticTaskSpec;
use lookahead::model::ModelConfig;
use lookahead::par::Execution;
use lookahead::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub parallel: bool,
    pub batch_size: usize,

    pub data_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_patch: usize,
    pub d_feat: usize,
    pub noise: f64,
    pub template_noise: f64,
    pub color_noise: f64,
    pub count_noise: f64,

    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// 0 means "take it from the corpus vocabulary".
    pub vocab_size: usize,
    pub max_len: usize,
    pub tie_decoder_init: bool,

    pub lambda: f64,
    pub mask_ratio: f64,
    pub stage1_steps: usize,
    pub stage1_lr: f64,
    pub stage1_warmup: usize,
    pub stage1_scst_steps: usize,

    pub epsilon: f64,
    pub mask_strategy: MaskStrategy,
    /// 0 means `max(1, round(mask_ratio·|S|))` for the random strategy.
    pub random_k: usize,
    pub sample_fraction: f64,
    pub cdc_steps: usize,
    pub cdc_lr: f64,
    pub cdc_warmup: usize,
    pub cdc_scst_steps: usize,

    pub checkpoint_every: usize,
    pub eval_split: String,
    pub profile_buckets: usize,
    pub histogram_width: f64,

    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub log_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let task = SyntheticTaskSpec::default();
        Self {
            seed: 0,
            parallel: true,
            batch_size: 16,
            data_seed: task.seed,
            n_train: 10_000,
            n_val: task.n_val,
            n_test: task.n_test,
            n_patch: task.n_patch,
            d_feat: task.d_feat,
            noise: task.noise,
            template_noise: task.template_noise,
            color_noise: task.color_noise,
            count_noise: task.count_noise,
            d_model: 32,
            d_ff: 128,
            n_heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            vocab_size: 0,
            max_len: 16,
            tie_decoder_init: true,
            lambda: 0.7,
            mask_ratio: 0.3,
            stage1_steps: 2000,
            stage1_lr: 1e-3,
            stage1_warmup: 200,
            stage1_scst_steps: 0,
            epsilon: 0.2,
            mask_strategy: MaskStrategy::Threshold,
            random_k: 0,
            sample_fraction: 1.0,
            cdc_steps: 1000,
            cdc_lr: 3e-4,
            cdc_warmup: 0,
            cdc_scst_steps: 0,
            checkpoint_every: 500,
            eval_split: "test".into(),
            profile_buckets: 10,
            histogram_width: 0.1,
            data_dir: "runs/data".into(),
            checkpoint_dir: "runs/checkpoints".into(),
            log_dir: "runs/logs".into(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

macro_rules! keys {
    ($($key:literal => $field:ident,)*) => {
        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $($key => self.$field = parse_value(key, value)?,)*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            pub fn to_kv(&self) -> BTreeMap<&'static str, String> {
                let mut m = BTreeMap::new();
                $(m.insert($key, Show(&self.$field).to_string());)*
                m
            }
        }
    };
}

keys! {
    "seed" => seed,
    "parallel" => parallel,
    "batch_size" => batch_size,
    "data.seed" => data_seed,
    "data.n_train" => n_train,
    "data.n_val" => n_val,
    "data.n_test" => n_test,
    "data.n_patch" => n_patch,
    "data.d_feat" => d_feat,
    "data.noise" => noise,
    "data.template_noise" => template_noise,
    "data.color_noise" => color_noise,
    "data.count_noise" => count_noise,
    "model.d_model" => d_model,
    "model.d_ff" => d_ff,
    "model.n_heads" => n_heads,
    "model.enc_layers" => enc_layers,
    "model.dec_layers" => dec_layers,
    "model.vocab_size" => vocab_size,
    "model.max_len" => max_len,
    "model.tie_decoder_init" => tie_decoder_init,
    "lambda" => lambda,
    "mask_ratio" => mask_ratio,
    "stage1.steps" => stage1_steps,
    "stage1.lr" => stage1_lr,
    "stage1.warmup" => stage1_warmup,
    "stage1.scst_steps" => stage1_scst_steps,
    "epsilon" => epsilon,
    "mask_strategy" => mask_strategy,
    "random_k" => random_k,
    "sample_fraction" => sample_fraction,
    "cdc.steps" => cdc_steps,
    "cdc.lr" => cdc_lr,
    "cdc.warmup" => cdc_warmup,
    "cdc.scst_steps" => cdc_scst_steps,
    "checkpoint_every" => checkpoint_every,
    "eval_split" => eval_split,
    "profile_buckets" => profile_buckets,
    "histogram_width" => histogram_width,
    "paths.data" => data_dir,
    "paths.checkpoints" => checkpoint_dir,
    "paths.logs" => log_dir,
}

/// Display adapter; paths print lossily.
struct Show<'a, T>(&'a T);

macro_rules! show_via_display {
    ($($t:ty),*) => {$(
        impl std::fmt::Display for Show<'_, $t> {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    )*};
}
show_via_display!(u64, usize, f64, bool, String, MaskStrategy);

impl std::fmt::Display for Show<'_, PathBuf> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0.display())
    }
}

/// `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse { line: i + 1, msg: format!("expected key = value, got {raw:?}") })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in parse_kv(text)? {
            c.set(&k, &v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_kv() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Defaults, then `file` if given, then each `key=value` override.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut c = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => Error::Missing(p.to_path_buf()),
                    _ => Error::io(p)(e),
                })?;
                let mut c = Self::default();
                for (k, v) in parse_kv(&text)? {
                    c.set(&k, &v)?;
                }
                c
            }
            None => Self::default(),
        };
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} outside [0,1]")))
            }
        };
        unit("lambda", self.lambda)?;
        unit("epsilon", self.epsilon)?;
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return Err(Error::Config(format!("mask_ratio = {} outside (0,1]", self.mask_ratio)));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(Error::Config(format!("sample_fraction = {} outside (0,1]", self.sample_fraction)));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!("model.d_model {} not divisible by model.n_heads {}", self.d_model, self.n_heads)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, v) in [("stage1.lr", self.stage1_lr), ("cdc.lr", self.cdc_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let w = self.histogram_width;
        if !(w > 0.0 && w <= 1.0) || ((1.0 / w).round() * w - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("histogram_width = {w} must divide 1")));
        }
        if self.profile_buckets < 2 {
            return Err(Error::Config("profile_buckets must be at least 2".into()));
        }
        if !["train", "val", "test"].contains(&self.eval_split.as_str()) {
            return Err(Error::Config(format!("eval_split {:?} is not train, val or test", self.eval_split)));
        }
        let paths = [&self.data_dir, &self.checkpoint_dir, &self.log_dir];
        for i in 0..paths.len() {
            for j in i + 1..paths.len() {
                if paths[i] == paths[j] {
                    return Err(Error::Config(format!("paths must be distinct: {} used twice", paths[i].display())));
                }
            }
        }
        Ok(())
    }

    pub fn exec(&self) -> Execution {
        if self.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    pub fn task_spec(&self) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            seed: self.data_seed,
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            n_patch: self.n_patch,
            d_feat: self.d_feat,
            noise: self.noise,
            template_noise: self.template_noise,
            color_noise: self.color_noise,
            count_noise: self.count_noise,
            ..SyntheticTaskSpec::default()
        }
    }

    pub fn model_config(&self, corpus_vocab: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            d_ff: self.d_ff,
            n_heads: self.n_heads,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            vocab_size: if self.vocab_size == 0 { corpus_vocab } else { self.vocab_size },
            max_len: self.max_len,
            d_feat: self.d_feat,
            max_patches: self.n_patch.max(4),
            init_seed: self.seed,
            tie_decoder_init: self.tie_decoder_init,
            ..ModelConfig::desk(corpus_vocab, self.d_feat)
        }
    }

    pub fn stage1(&self) -> Stage1Config {
        Stage1Config {
            lambda: self.lambda,
            mask_ratio: self.mask_ratio,
            steps: self.stage1_steps,
            batch_size: self.batch_size,
            seed: self.seed,
            scst_steps: self.stage1_scst_steps,
            stop_after: None,
            exec: self.exec(),
        }
    }

    pub fn cdc(&self) -> CdcConfig {
        CdcConfig {
            selection: Selection {
                strategy: self.mask_strategy,
                epsilon: self.epsilon,
                k: (self.random_k > 0).then_some(self.random_k),
                mask_ratio: self.mask_ratio,
            },
            sample_fraction: self.sample_fraction,
            total_steps: self.cdc_steps,
            batch_size: self.batch_size,
            seed: self.seed,
            scst_steps: self.cdc_scst_steps,
            stop_after: None,
            exec: self.exec(),
        }
    }
}
