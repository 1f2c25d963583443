//! Shared fixtures for the benchmarks.

use headfed_core::data::{generate, SyntheticTask};
use headfed_core::ExperimentConfig;

/// Sequences and labels from the default task.
pub fn sample_batch(n: usize, seed: u64) -> (Vec<Vec<u32>>, Vec<usize>) {
    let ds = generate(&SyntheticTask::default(), n, seed).expect("default task is valid");
    let seqs = ds.sequences().into_iter().map(<[u32]>::to_vec).collect();
    (seqs, ds.labels())
}

/// A short single-threaded experiment, small enough to iterate on.
pub fn small_experiment() -> ExperimentConfig {
    ExperimentConfig {
        clients: 4,
        per_round: 2,
        rounds: 1,
        train_samples: 96,
        val_samples: 48,
        local_lr: 0.1,
        threads: 1,
        ..ExperimentConfig::default()
    }
}
