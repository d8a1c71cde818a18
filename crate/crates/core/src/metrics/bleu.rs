//! BLEU with clipped n-gram precision and brevity penalty, no smoothing.

use std::collections::BTreeMap;

pub(crate) fn ngram_counts(tokens: &[usize], n: usize) -> BTreeMap<&[usize], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and candidate n-gram total for one order.
fn clipped(candidate: &[usize], references: &[Vec<usize>], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let mut max_ref: BTreeMap<&[usize], usize> = BTreeMap::new();
    for r in references {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matches = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
    (matches, cand.values().sum())
}

/// Reference length closest to `c`; ties go to the shorter one.
fn closest_ref_len(c: usize, references: &[Vec<usize>]) -> usize {
    references.iter().map(Vec::len).min_by_key(|&r| (r.abs_diff(c), r)).unwrap_or(0)
}

fn combine(matches: &[usize], totals: &[usize], c: usize, r: usize) -> f64 {
    if c == 0 || matches.iter().zip(totals).any(|(&m, &t)| m == 0 || t == 0) {
        return 0.0;
    }
    let n = matches.len() as f64;
    let log_p: f64 = matches.iter().zip(totals).map(|(&m, &t)| (m as f64 / t as f64).ln()).sum::<f64>() / n;
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * log_p.exp()
}

/// Sentence BLEU-`n`: geometric mean of clipped precisions for orders
/// `1..=n`, times the brevity penalty.
pub fn bleu_n(candidate: &[usize], references: &[Vec<usize>], n: usize) -> f64 {
    assert!(n >= 1, "BLEU order must be at least 1");
    if candidate.is_empty() {
        log::warn!("BLEU of an empty candidate is 0");
        return 0.0;
    }
    let (m, t): (Vec<_>, Vec<_>) = (1..=n).map(|k| clipped(candidate, references, k)).unzip();
    combine(&m, &t, candidate.len(), closest_ref_len(candidate.len(), references))
}

/// Corpus BLEU-`n`: counts and lengths summed over the corpus before the
/// ratios are taken.
pub fn corpus_bleu(candidates: &[Vec<usize>], references: &[Vec<Vec<usize>>], n: usize) -> f64 {
    assert!(n >= 1, "BLEU order must be at least 1");
    assert_eq!(candidates.len(), references.len());
    let mut m = vec![0; n];
    let mut t = vec![0; n];
    let (mut c, mut r) = (0, 0);
    for (cand, refs) in candidates.iter().zip(references) {
        for k in 1..=n {
            let (mk, tk) = clipped(cand, refs, k);
            m[k - 1] += mk;
            t[k - 1] += tk;
        }
        c += cand.len();
        r += closest_ref_len(cand.len(), refs);
    }
    combine(&m, &t, c, r)
}
