//! Parallel-versus-sequential throughput comparisons, plus the scaling
//! probes the engine's design leans on: negative sampling should cost the
//! same on a huge catalog as on a small one, and the augmented objective's
//! epoch should stay within a small factor of plain pairwise training.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cfct_core::augment::{label_negative, sample_negative_pair, selection_monte_carlo};
use cfct_core::eval::{evaluate_seq, Similarity};
use cfct_core::ingest::{build_dataset, InteractionDataset};
use cfct_core::losses::LossKind;
use cfct_core::synth::{generate, SynthConfig};
use cfct_core::trainer::{run_training, HyperParams, TrainMode};

fn bench_corpus() -> InteractionDataset {
    let rows = generate(&SynthConfig::default()).expect("valid config");
    build_dataset(&rows, 0.2, 11).expect("valid corpus")
}

fn bench_evaluate(c: &mut Criterion) {
    let ds = bench_corpus();
    let hp = HyperParams {
        epochs: 0,
        ..HyperParams::default()
    };
    let (table, _) = run_training(&ds, &hp, TrainMode::Sequential).unwrap();
    let cutoffs = [5, 10, 20];

    let mut group = c.benchmark_group("evaluate");
    group.bench_function("sequential", |b| {
        b.iter(|| evaluate_seq(&table, &ds, &cutoffs, Similarity::Cosine).unwrap())
    });
    #[cfg(feature = "parallel")]
    group.bench_function("parallel", |b| {
        b.iter(|| {
            cfct_core::eval::evaluate_par(&table, &ds, &cutoffs, Similarity::Cosine).unwrap()
        })
    });
    group.finish();
}

fn bench_selection_monte_carlo(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    rng.set_stream(0);
    let scores: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.77).sin() * 3.0).collect();
    let trials = 200_000;

    let mut group = c.benchmark_group("selection_monte_carlo");
    group.sample_size(10);
    group.bench_function("sequential", |b| {
        b.iter(|| {
            let mut mc = ChaCha8Rng::seed_from_u64(5);
            mc.set_stream(1);
            selection_monte_carlo(&scores, 0.75, trials, &mut mc).unwrap()
        })
    });
    #[cfg(feature = "parallel")]
    group.bench_function("parallel", |b| {
        b.iter(|| {
            cfct_core::augment::selection_monte_carlo_par(&scores, 0.75, trials, 5).unwrap()
        })
    });
    group.finish();
}

fn bench_train_epoch(c: &mut Criterion) {
    let ds = bench_corpus();
    let mut group = c.benchmark_group("train_epoch");
    group.sample_size(10);
    for kind in [LossKind::Bpr, LossKind::Proposed, LossKind::Infonce] {
        let hp = HyperParams {
            epochs: 1,
            loss: kind,
            ..HyperParams::default()
        };
        group.bench_function(kind.name(), |b| {
            b.iter(|| run_training(&ds, &hp, TrainMode::Sequential).unwrap())
        });
        #[cfg(feature = "parallel")]
        group.bench_function(format!("{}_parallel", kind.name()), |b| {
            b.iter(|| run_training(&ds, &hp, TrainMode::Parallel).unwrap())
        });
    }
    group.finish();
}

fn bench_negative_sampling(c: &mut Criterion) {
    let mut group = c.benchmark_group("negative_sampling");
    for catalog in [1_000usize, 100_000] {
        let positives: Vec<u32> = (0..100).map(|i| i * 7).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(2);
        group.bench_function(format!("catalog_{catalog}"), |b| {
            b.iter(|| {
                let (j, jp) = sample_negative_pair(&positives, catalog, &mut rng).unwrap();
                label_negative((j, j as f64), (jp, jp as f64), 0.75, &mut rng).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_evaluate,
    bench_selection_monte_carlo,
    bench_train_epoch,
    bench_negative_sampling
);
criterion_main!(benches);
