use std::collections::{BTreeMap, BTreeSet};

use super::*;

fn small_spec() -> SyntheticTaskSpec {
    SyntheticTaskSpec { n_train: 30, n_val: 5, n_test: 5, ..SyntheticTaskSpec::default() }
}

#[test]
fn same_seed_same_corpus() {
    let a = generate_corpus(&small_spec()).unwrap();
    let b = generate_corpus(&small_spec()).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.test, b.test);
    let c = generate_corpus(&SyntheticTaskSpec { seed: 2, ..small_spec() }).unwrap();
    assert_ne!(a.train, c.train);
}

#[test]
fn generated_captions_parse_back() {
    let g = Grammar::new(small_spec()).unwrap();
    for a in g.enumerate() {
        assert_eq!(g.parse(&g.realize(&a)), Some(a));
    }
    let corpus = g.generate();
    for r in corpus.train.iter().chain(&corpus.val).chain(&corpus.test) {
        r.validate(Some(g.vocab_size())).unwrap();
        assert!(g.parse(&r.references[0]).is_some(), "{}", g.render(&r.references[0]));
    }
    // Wrong article is not a sentence of the grammar.
    let bad: Vec<usize> = ["on", "the", "table", "sits", "an", "red", "cat"].iter().map(|w| g.id(w)).collect();
    assert_eq!(g.parse(&bad), None);
}

#[test]
fn default_vocabulary_counted_from_realized_tokens() {
    let g = Grammar::new(SyntheticTaskSpec::default()).unwrap();
    let mut used = BTreeSet::new();
    for a in g.enumerate() {
        used.extend(g.realize(&a));
    }
    // 4 reserved symbols plus every realised word.
    assert_eq!(g.vocab_size(), 4 + used.len());
    assert!(g.vocab_size() <= 120);
    assert_eq!(g.enumerate().len(), 5 * 4 * 3 * 2);
}

#[test]
fn splits_disjoint_by_id() {
    let c = generate_corpus(&small_spec()).unwrap();
    let mut ids = BTreeSet::new();
    for r in c.train.iter().chain(&c.val).chain(&c.test) {
        assert!(ids.insert(r.id.clone()));
    }
    assert_eq!(c.train.len(), 30);
    assert_eq!(c.val.len(), 5);
}

#[test]
fn spec_errors() {
    let over = SyntheticTaskSpec { max_vocab: 20, ..small_spec() };
    assert!(matches!(Grammar::new(over), Err(Error::Spec(_))));
    let plural_only = SyntheticTaskSpec { counts: vec![2, 3], ..small_spec() };
    assert!(matches!(Grammar::new(plural_only), Err(Error::Spec(_))));
    let empty = SyntheticTaskSpec { objects: vec![], ..small_spec() };
    assert!(matches!(Grammar::new(empty), Err(Error::Spec(_))));
    let zero = SyntheticTaskSpec { n_test: 0, ..small_spec() };
    assert!(matches!(Grammar::new(zero), Err(Error::Spec(_))));
    let noisy = SyntheticTaskSpec { color_noise: -0.1, ..small_spec() };
    assert!(matches!(Grammar::new(noisy), Err(Error::Spec(_))));
    let nan = SyntheticTaskSpec { template_noise: f64::NAN, ..small_spec() };
    assert!(matches!(Grammar::new(nan), Err(Error::Spec(_))));
}

fn entropy(counts: &BTreeMap<usize, usize>) -> f64 {
    let n: usize = counts.values().sum();
    counts.values().map(|&c| c as f64 / n as f64).map(|p| -p * p.ln()).sum()
}

/// H(token_i | left context) and H(token_i | all other tokens), averaged over
/// contexts with the uniform distribution on attribute combinations.
fn conditional_entropies(g: &Grammar, i: usize, template: usize) -> (f64, f64) {
    let captions: Vec<Vec<usize>> =
        g.enumerate().into_iter().filter(|a| a.template == template).map(|a| g.realize(&a)).collect();
    let total = captions.len() as f64;
    let mut left: BTreeMap<Vec<usize>, BTreeMap<usize, usize>> = BTreeMap::new();
    let mut full: BTreeMap<Vec<usize>, BTreeMap<usize, usize>> = BTreeMap::new();
    for c in &captions {
        *left.entry(c[..i].to_vec()).or_default().entry(c[i]).or_default() += 1;
        let mut ctx = c.clone();
        ctx[i] = usize::MAX;
        *full.entry(ctx).or_default().entry(c[i]).or_default() += 1;
    }
    let avg = |m: &BTreeMap<Vec<usize>, BTreeMap<usize, usize>>| {
        m.values().map(|c| c.values().sum::<usize>() as f64 / total * entropy(c)).sum::<f64>()
    };
    (avg(&left), avg(&full))
}

#[test]
fn future_dependent_positions_need_right_context() {
    let g = Grammar::new(SyntheticTaskSpec::default()).unwrap();
    // 0-indexed: "is/are" at 1 in the first template, "sits/sit" at 3 in
    // the second.
    for (template, i) in [(0, 1), (1, 3)] {
        let (h_left, h_full) = conditional_entropies(&g, i, template);
        assert!(h_left > 0.1, "template {template} position {i}: {h_left}");
        assert_eq!(h_full, 0.0, "template {template} position {i}");
    }
    // Every template has such a position: some token is a function of a
    // later token.
    for template in 0..2 {
        let caps: Vec<Vec<usize>> =
            g.enumerate().into_iter().filter(|a| a.template == template).map(|a| g.realize(&a)).collect();
        let found = (0..caps[0].len()).any(|i| {
            (i + 1..caps[0].len()).any(|j| {
                let mut f: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
                for c in &caps {
                    f.entry(c[j]).or_default().insert(c[i]);
                }
                let distinct: BTreeSet<usize> = caps.iter().map(|c| c[i]).collect();
                distinct.len() > 1 && f.values().all(|s| s.len() == 1)
            })
        });
        assert!(found, "template {template}");
    }
}

#[test]
fn corpus_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    let c = generate_corpus(&small_spec()).unwrap();
    save_corpus(&c.train, &path).unwrap();
    assert_eq!(load_corpus(&path).unwrap(), c.train);
    let bytes = std::fs::read(&path).unwrap();
    save_corpus(&load_corpus(&path).unwrap(), &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

#[test]
fn empty_file_is_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.jsonl");
    std::fs::write(&path, "").unwrap();
    assert!(load_corpus(&path).unwrap().is_empty());
}

#[test]
fn truncated_last_line_names_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let c = generate_corpus(&small_spec()).unwrap();
    save_corpus(&c.val[..3], &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, &text[..text.len() - 20]).unwrap();
    match load_corpus(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    assert!(matches!(load_corpus(&dir.path().join("nope")), Err(Error::Missing(_))));
}

#[test]
fn record_validation() {
    let mut r = generate_corpus(&small_spec()).unwrap().train.remove(0);
    r.validate(Some(40)).unwrap();
    assert!(r.validate(Some(5)).is_err());
    r.features[0][0] = f64::NAN;
    assert!(r.validate(None).is_err());
    r.features[0][0] = 0.0;
    r.references.clear();
    assert!(r.validate(None).is_err());
    assert_eq!(r.features_tensor().shape(), &[4, 16]);
}
