use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use tlpo_core::data::{encode_prompts, gen_synthetic_corpus, split_heldout, CorpusSpec};
use tlpo_core::detector::{Detector, EnglishMode, ScriptRules, TargetLanguage};
use tlpo_core::trainer::{evaluate, rollout_step, run_training, TrainConfig, TrainData};
use tlpo_core::ExecMode;

const MODES: [(&str, ExecMode); 2] = [
    ("sequential", ExecMode::Sequential),
    ("parallel", ExecMode::Parallel),
];

fn bench(c: &mut Criterion) {
    let spec = CorpusSpec::default();
    let world = gen_synthetic_corpus(&spec).unwrap();
    let det = Detector::new(
        ScriptRules::new(TargetLanguage::Korean),
        EnglishMode::Neutral,
    );
    let enc = encode_prompts(&world.prompts, &world.vocab).unwrap();
    let (train, heldout) = split_heldout(&enc, spec.heldout_fraction);

    let mut g = c.benchmark_group("rollout_256");
    let batch: Vec<_> = (0..256u64)
        .map(|i| (i, &train[i as usize % train.len()]))
        .collect();
    for (name, exec) in MODES {
        let cfg = TrainConfig {
            exec,
            ..Default::default()
        };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| rollout_step(&world.policy, &batch, &cfg, &world.vocab, &det).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("evaluate_heldout");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                evaluate(&world.policy, &world.vocab, &heldout, &det, 16, 8, 0, exec).unwrap()
            })
        });
    }
    g.finish();

    let mut g = c.benchmark_group("train_100_steps");
    g.sample_size(10);
    let data = TrainData {
        vocab: &world.vocab,
        train: &train,
        heldout: &heldout,
        detector: &det,
    };
    for (name, exec) in MODES {
        let cfg = TrainConfig {
            steps: 100,
            batch_size: 64,
            beta: 0.0,
            exec,
            ..Default::default()
        };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_training(&cfg, &data, &world.policy, None, &mut |_| Ok(())).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
