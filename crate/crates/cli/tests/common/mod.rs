#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lookahead_cli::config::RunConfig;

/// A small run rooted in `dir`: fast enough to train in well under a second.
pub fn tiny_config(dir: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    let set = |c: &mut RunConfig, k: &str, v: &str| c.set(k, v).unwrap();
    for (k, v) in [
        ("data.n_train", "40"),
        ("data.n_val", "8"),
        ("data.n_test", "8"),
        ("data.d_feat", "6"),
        ("model.d_model", "8"),
        ("model.d_ff", "16"),
        ("model.n_heads", "2"),
        ("model.enc_layers", "1"),
        ("model.dec_layers", "1"),
        ("batch_size", "4"),
        ("stage1.steps", "6"),
        ("stage1.warmup", "2"),
        ("cdc.steps", "4"),
        ("checkpoint_every", "2"),
        ("epsilon", "0.5"),
    ] {
        set(&mut c, k, v);
    }
    c.data_dir = dir.join("data");
    c.checkpoint_dir = dir.join("ckpt");
    c.log_dir = dir.join("logs");
    c.validate().unwrap();
    c
}

pub fn write_config(dir: &Path, c: &RunConfig) -> PathBuf {
    let p = dir.join("run.cfg");
    std::fs::write(&p, c.serialize()).unwrap();
    p
}

pub fn cli(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lookahead")).arg("--config").arg(config).args(args).output().unwrap()
}

/// Runs and insists on success.
pub fn ok(config: &Path, args: &[&str]) -> String {
    let out = cli(config, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Every file under `dir` except timestamp sidecars, by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.to_string_lossy().ends_with(".meta.txt") {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}
