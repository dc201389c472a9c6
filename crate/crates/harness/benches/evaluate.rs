//! Test-split evaluation of an untrained model, sequential vs rayon.

use criterion::{criterion_group, criterion_main, Criterion};
use depthprompt_core::{BiasSpec, EvalWindow, Execution};
use depthprompt_harness::config::CorpusConfig;
use depthprompt_harness::corpus::{synthesize, Split};
use depthprompt_harness::evaluate;
use depthprompt_harness::train::{foundation_checkpoint, initial_backbone};
use depthprompt_harness::RunConfig;

fn evaluation(c: &mut Criterion) {
    let cfg = RunConfig {
        corpus: CorpusConfig {
            n_test: 16,
            ..Default::default()
        },
        ..Default::default()
    };
    let scenes = synthesize(&cfg.corpus, &cfg.splits, Split::Test, Execution::Parallel).unwrap();
    let checkpoint = foundation_checkpoint(&cfg, initial_backbone(&cfg)).unwrap();
    let spec = BiasSpec::random(100);

    let mut group = c.benchmark_group("evaluate_16_scenes");
    group.sample_size(10);
    for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        group.bench_function(name, |b| {
            b.iter(|| evaluate(&checkpoint, &spec, &scenes, EvalWindow::default(), exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, evaluation);
criterion_main!(benches);
