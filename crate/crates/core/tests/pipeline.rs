use lookahead::calibration::{train_cdc, train_stage1, Adam, CdcConfig, Stage1Config};
use lookahead::data::{generate_corpus, load_corpus, save_corpus, CaptionRecord, Grammar, SyntheticTaskSpec};
use lookahead::metrics::evaluate;
use lookahead::model::{Checkpoint, ModelBundle, ModelConfig};
use lookahead::par::Execution;

fn spec() -> SyntheticTaskSpec {
    SyntheticTaskSpec { n_train: 24, n_val: 6, n_test: 6, d_feat: 6, seed: 5, ..Default::default() }
}

fn bundle(vocab: usize) -> ModelBundle {
    let mut c = ModelConfig::desk(vocab, 6);
    c.d_model = 8;
    c.d_ff = 16;
    c.n_heads = 2;
    c.enc_layers = 1;
    c.dec_layers = 1;
    ModelBundle::new(c).unwrap()
}

fn stage1(exec: Execution, steps: usize) -> Stage1Config {
    Stage1Config { steps, batch_size: 4, seed: 9, exec, ..Default::default() }
}

fn trained(data: &[CaptionRecord], vocab: usize, exec: Execution) -> ModelBundle {
    let mut b = bundle(vocab);
    train_stage1(&mut b, data, &stage1(exec, 3), &mut Adam::new(1e-3, 0), |_, _, _| Ok(())).unwrap();
    b
}

#[test]
fn corpus_survives_a_file_round_trip() {
    let corpus = generate_corpus(&spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    save_corpus(&corpus.train, &path).unwrap();
    assert_eq!(load_corpus(&path).unwrap(), corpus.train);
}

#[test]
fn parallel_and_sequential_training_agree_bitwise() {
    let vocab = Grammar::new(spec()).unwrap().vocab_size();
    let corpus = generate_corpus(&spec()).unwrap();
    let p = trained(&corpus.train, vocab, Execution::Parallel);
    let s = trained(&corpus.train, vocab, Execution::Sequential);
    let ids: Vec<_> = p.store.iter().map(|(id, _)| id).collect();
    assert_eq!(p.serialize_params(&ids), s.serialize_params(&ids));
}

#[test]
fn checkpoint_reload_reproduces_evaluation() {
    let vocab = Grammar::new(spec()).unwrap().vocab_size();
    let corpus = generate_corpus(&spec()).unwrap();
    let b = trained(&corpus.train, vocab, Execution::Sequential);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    b.to_checkpoint().save(&path).unwrap();
    let back = ModelBundle::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    let (m1, l1) = evaluate(&b, &corpus.test, Execution::Sequential).unwrap();
    let (m2, l2) = evaluate(&back, &corpus.test, Execution::Sequential).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(l1, l2);
}

#[test]
fn calibration_keeps_the_teacher_and_moves_the_student() {
    let vocab = Grammar::new(spec()).unwrap().vocab_size();
    let corpus = generate_corpus(&spec()).unwrap();
    let mut b = trained(&corpus.train, vocab, Execution::Sequential);
    b.split_encoders();
    let teacher_ids = b.teacher_param_ids();
    let student_ids = b.student_param_ids();
    let (teacher, student) = (b.serialize_params(&teacher_ids), b.serialize_params(&student_ids));
    let cfg = CdcConfig { total_steps: 3, batch_size: 4, seed: 2, exec: Execution::Sequential, ..Default::default() };
    let reports = train_cdc(&mut b, &corpus.train, &cfg, &mut Adam::new(1e-3, 0), |_, _, _| Ok(())).unwrap();
    assert_eq!(reports.len(), 3);
    assert!(!b.shared_encoder());
    assert_eq!(b.serialize_params(&teacher_ids), teacher);
    assert_ne!(b.serialize_params(&student_ids), student);
}
