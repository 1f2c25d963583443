use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use headfed_bench::small_experiment;
use headfed_core::aggregate::aggregate;
use headfed_core::federated::{PruningMode, Simulation};
use headfed_core::AggregationMode;

fn round(c: &mut Criterion) {
    let mut group = c.benchmark_group("round");
    group.sample_size(10);
    for (name, pruning, sparsity) in [("dense", PruningMode::None, 0.0), ("pruned50", PruningMode::Importance, 0.5)] {
        let cfg = headfed_core::ExperimentConfig {
            pruning,
            sparsity,
            ..small_experiment()
        };
        group.bench_function(name, |b| {
            b.iter_batched(
                || Simulation::new(cfg.clone()).unwrap(),
                |mut sim| black_box(sim.run_round().unwrap()),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn merge(c: &mut Criterion) {
    let cfg = headfed_core::ExperimentConfig {
        pruning: PruningMode::Importance,
        sparsity: 0.5,
        ..small_experiment()
    };
    let sim = Simulation::new(cfg).unwrap();
    let updates: Vec<_> = sim.train_clients(&[0, 1]).unwrap().into_iter().map(|r| r.update).collect();
    for mode in [AggregationMode::Fedavg, AggregationMode::Weighted] {
        c.bench_function(&format!("aggregate_{mode:?}").to_lowercase(), |b| {
            b.iter(|| black_box(aggregate(&sim.global, &updates, mode).unwrap()))
        });
    }
    let encoded = updates[0].encode();
    c.bench_function("update_encode", |b| b.iter(|| black_box(updates[0].encode())));
    c.bench_function("update_decode", |b| {
        b.iter(|| black_box(headfed_core::ClientUpdate::decode(&encoded).unwrap()))
    });
}

criterion_group!(benches, round, merge);
criterion_main!(benches);
