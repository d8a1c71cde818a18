//! BLEU, CIDEr-D and model evaluation over a record set.

mod bleu;
mod cider;

pub use bleu::{bleu_n, corpus_bleu};
pub use cider::{cider, cider_per_image, CiderScorer};

use crate::analysis::{PredictionEntry, PredictionLog};
use crate::data::CaptionRecord;
use crate::error::Result;
use crate::model::ModelBundle;
use crate::par::{self, Execution};
use crate::tensor::{softmax_row, Graph};
use crate::vocab::{self, shift_right, EOS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricTable {
    pub bleu1: f64,
    pub bleu4: f64,
    pub cider: f64,
    pub avg_gt_prob: f64,
}

impl MetricTable {
    pub const CSV_HEADER: &'static str = "bleu1,bleu4,cider,avg_gt_prob";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.bleu1, self.bleu4, self.cider, self.avg_gt_prob)
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}

/// Per-position teacher-forced probabilities of the first reference plus
/// `<eos>`, for every record.
pub fn prediction_log(
    bundle: &ModelBundle,
    records: &[CaptionRecord],
    model_tag: &str,
    corpus_tag: &str,
    exec: Execution,
) -> Result<PredictionLog> {
    let per_record = par::try_map(exec, records, |_, r| -> Result<Vec<PredictionEntry>> {
        let target = r.target();
        let mut g = Graph::detached(&bundle.store);
        let out = bundle.aic_forward(&mut g, &r.features_tensor(), &shift_right(&target))?;
        let logits = g.value(out.logits);
        let mut probs = vec![0.0; logits.cols()];
        let mut entries = Vec::with_capacity(target.len());
        for (t, &gt) in target.iter().enumerate() {
            softmax_row(logits.row(t), None, &mut probs);
            let mut arg = EOS;
            for (v, &p) in probs.iter().enumerate() {
                if vocab::is_emittable(v) && p > probs[arg] {
                    arg = v;
                }
            }
            entries.push(PredictionEntry {
                record_id: r.id.clone(),
                position: t + 1,
                length: target.len(),
                gt_token: gt,
                prob: probs[gt],
                argmax_token: arg,
            });
        }
        Ok(entries)
    })?;
    Ok(PredictionLog::new(model_tag, corpus_tag, per_record.into_iter().flatten().collect()))
}

/// Greedy captions for every record (end symbol stripped).
pub fn greedy_captions(bundle: &ModelBundle, records: &[CaptionRecord], exec: Execution) -> Result<Vec<Vec<usize>>> {
    let max_len = bundle.config.max_len;
    par::try_map(exec, records, |_, r| Ok(bundle.greedy_decode(&r.features_tensor(), max_len)?.words().to_vec()))
}

/// Greedy-decodes the records and scores them; `avg_gt_prob` is the mean
/// of the returned log.
pub fn evaluate(bundle: &ModelBundle, records: &[CaptionRecord], exec: Execution) -> Result<(MetricTable, PredictionLog)> {
    let captions = greedy_captions(bundle, records, exec)?;
    let refs: Vec<Vec<Vec<usize>>> = records.iter().map(|r| r.references.clone()).collect();
    let log = prediction_log(bundle, records, "model", "eval", exec)?;
    let table = MetricTable {
        bleu1: corpus_bleu(&captions, &refs, 1),
        bleu4: corpus_bleu(&captions, &refs, 4),
        cider: cider(&captions, &refs)?,
        avg_gt_prob: log.mean_prob().unwrap_or(0.0),
    };
    Ok((table, log))
}
