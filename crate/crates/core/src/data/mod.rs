//! Caption records, the synthetic task and the JSON-lines corpus format.

mod synthetic;

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use synthetic::{generate_corpus, Attributes, Corpus, Grammar, SyntheticTaskSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::EOS;

/// One image: region features plus 1–5 reference captions (word ids, no
/// end symbol).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub features: Vec<Vec<f64>>,
    pub references: Vec<Vec<usize>>,
}

impl CaptionRecord {
    pub fn validate(&self, vocab_size: Option<usize>) -> Result<()> {
        if self.references.is_empty() || self.references.len() > 5 {
            return Err(Error::Degenerate(format!("record {} has {} references", self.id, self.references.len())));
        }
        if self.features.is_empty() {
            return Err(Error::Degenerate(format!("record {} has no features", self.id)));
        }
        let d = self.features[0].len();
        if d == 0 || self.features.iter().any(|f| f.len() != d) {
            return Err(Error::Shape(format!("record {} has ragged features", self.id)));
        }
        if self.features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!("record {} has non-finite features", self.id)));
        }
        if let Some(v) = vocab_size {
            if let Some(&t) = self.references.iter().flatten().find(|&&t| t >= v) {
                return Err(crate::error::TensorError::Vocabulary { token: t, vocab: v }.into());
            }
        }
        Ok(())
    }

    pub fn features_tensor(&self) -> Tensor {
        let rows = self.features.len();
        let cols = self.features.first().map_or(0, Vec::len);
        Tensor::matrix(rows, cols, self.features.concat()).expect("validated feature matrix")
    }

    /// Training target: the first reference followed by `<eos>`.
    pub fn target(&self) -> Vec<usize> {
        let mut t = self.references[0].clone();
        t.push(EOS);
        t
    }
}

/// Writes one JSON object per line.
pub fn save_corpus(records: &[CaptionRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialise");
        writeln!(w, "{line}").map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

/// Reads a file written by [`save_corpus`]. Blank lines are skipped; an
/// empty file is an empty corpus.
pub fn load_corpus(path: &Path) -> Result<Vec<CaptionRecord>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let file = std::fs::File::open(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaptionRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        rec.validate(None).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
