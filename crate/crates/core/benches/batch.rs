use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lookahead::calibration::{cdc_gradients, derive_rng, sample_neuron_map, stage1_gradients, CdcConfig, Stage1Config};
use lookahead::data::{Grammar, SyntheticTaskSpec};
use lookahead::model::{ModelBundle, ModelConfig};
use lookahead::par::Execution;

fn setup() -> (ModelBundle, Vec<lookahead::data::CaptionRecord>) {
    let spec = SyntheticTaskSpec { n_train: 32, n_val: 1, n_test: 1, ..SyntheticTaskSpec::default() };
    let grammar = Grammar::new(spec.clone()).unwrap();
    let corpus = grammar.generate();
    let bundle = ModelBundle::new(ModelConfig::desk(grammar.vocab_size(), spec.d_feat)).unwrap();
    (bundle, corpus.train)
}

fn batch_gradients(c: &mut Criterion) {
    let (bundle, batch) = setup();
    let mut teacher = bundle.clone();
    teacher.split_encoders();
    teacher.set_teacher_frozen(true);
    let map = sample_neuron_map(teacher.config.d_model, 1.0, &mut derive_rng(0, &[0])).unwrap();

    let mut group = c.benchmark_group("batch_gradients");
    for exec in [Execution::Sequential, Execution::Parallel] {
        let name = format!("{exec:?}").to_lowercase();
        let s1 = Stage1Config { exec, ..Stage1Config::default() };
        group.bench_function(BenchmarkId::new("stage1", &name), |b| {
            b.iter(|| black_box(stage1_gradients(&bundle, &batch[..16], &s1, 0).unwrap()))
        });
        let cdc = CdcConfig { exec, ..CdcConfig::default() };
        group.bench_function(BenchmarkId::new("cdc", &name), |b| {
            b.iter(|| black_box(cdc_gradients(&teacher, &batch[..16], &cdc, &map, 1.0, 0).unwrap()))
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = batch_gradients
}
criterion_main!(benches);
