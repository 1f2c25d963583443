//! Round loop: select, broadcast, score and prune, train locally, upload,
//! merge, evaluate.
//!
//! Every random stream is derived from the experiment seed, and client work
//! is keyed by `(seed, round, client)`, so results do not depend on how many
//! threads run the clients or in which order they finish.

mod config;
pub mod io;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{ExperimentConfig, PartitionMode, PruningMode};

use crate::aggregate::{aggregate, GlobalState};
use crate::cost::{ops_for_kept, ArchSpec, OpsConvention, PeftMethod, PruneAccounting};
use crate::data::{generate, partition_dirichlet, partition_iid, Dataset, Partition};
use crate::error::{Error, Result};
use crate::importance::{compute_importance, prune_by_sparsity, prune_random, ImportanceMatrix};
use crate::lora::wire::{serialize_sparse, ClientUpdate, UpdateHeader};
use crate::lora::{freeze_pruned, LoraAdapter, PruneMask};
use crate::model::{Batch, Evaluation, Model};
use crate::selection::{select_random, select_top_k, ClientLedger, SelectionMode};

/// Stream tags mixed into the experiment seed.
pub mod stream {
    pub const BACKBONE: u64 = 1;
    pub const DATA: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const ADAPTER: u64 = 4;
    pub const SELECTION: u64 = 5;
    pub const CLIENT: u64 = 6;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent sub-seed for `parts` under `seed`.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(seed), |acc, p| splitmix(acc ^ splitmix(*p)))
}

/// Named sub-seeds of an experiment, for manifests. Client streams are
/// further keyed by round and client id.
pub fn stream_seeds(seed: u64) -> Vec<(&'static str, u64)> {
    vec![
        ("backbone", derive_seed(seed, &[stream::BACKBONE])),
        ("data", derive_seed(seed, &[stream::DATA])),
        ("partition", derive_seed(seed, &[stream::PARTITION])),
        ("adapter", derive_seed(seed, &[stream::ADAPTER])),
        ("selection", derive_seed(seed, &[stream::SELECTION])),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client: usize,
    pub samples: usize,
    pub final_loss: f64,
    pub kept_heads: usize,
    /// Encoded upload size.
    pub bytes: u64,
    /// Forward plus backward MACs for one `max_len` sequence.
    pub ops_per_sequence: f64,
    /// `ops_per_sequence · epochs · samples`.
    pub train_ops: f64,
    /// Scores on the received model, before pruning.
    pub importance: Vec<f64>,
}

/// Equality ignores `wall_seconds`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// 1-based.
    pub round: usize,
    pub selected: Vec<usize>,
    pub accuracy: f64,
    pub loss: f64,
    pub clients: Vec<ClientMetrics>,
    pub bytes: u64,
    pub train_ops: f64,
    /// Not serialized, so metrics files stay reproducible.
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl PartialEq for RoundMetrics {
    fn eq(&self, o: &Self) -> bool {
        self.round == o.round
            && self.selected == o.selected
            && self.accuracy == o.accuracy
            && self.loss == o.loss
            && self.clients == o.clients
            && self.bytes == o.bytes
            && self.train_ops == o.train_ops
    }
}

/// What one client sends back, plus the bookkeeping the server logs.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalResult {
    pub update: ClientUpdate,
    pub importance: ImportanceMatrix,
    pub mask: PruneMask,
    /// The client's adapter after local training, before the delta is taken.
    pub trained: LoraAdapter,
}

/// Client side of a round: score heads on the received adapter, pick the
/// mask, run `E` epochs of minibatch gradient descent with pruned `B`
/// blocks frozen, and pack the delta.
pub fn local_train(
    model: &Model,
    config: &ExperimentConfig,
    client: usize,
    shard: &Dataset,
    global: &LoraAdapter,
    round: usize,
) -> Result<LocalResult> {
    if shard.is_empty() {
        return Err(Error::input(format!("client {client} has no data")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        config.seed,
        &[stream::CLIENT, round as u64, client as u64],
    ));
    let seqs = shard.sequences();
    let labels = shard.labels();
    let mut alpha = compute_importance(model, global, &seqs, config.importance, config.eval_batch)?;
    alpha.client_id = client;
    alpha.round = round;
    let cfg = model.config();
    let (mask, sent) = match config.pruning {
        PruningMode::None => (PruneMask::keep_all(cfg.layers, cfg.heads), alpha.clone()),
        PruningMode::Random => prune_random(&alpha, config.sparsity, &mut rng)?,
        PruningMode::Importance => prune_by_sparsity(&alpha, config.sparsity)?,
    };

    let mut local = global.clone();
    let mut order: Vec<usize> = (0..shard.len()).collect();
    for _ in 0..config.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch_seqs: Vec<&[u32]> = chunk.iter().map(|&i| seqs[i]).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let batch = Batch::new(&batch_seqs, cfg.max_len)?;
            let (_, mut grads) = model.loss_and_grad(&local, &batch, &batch_labels)?;
            freeze_pruned(&mut grads, &mask)?;
            local.axpy(-config.local_lr, &grads)?;
        }
    }
    let eval = model.evaluate(&local, &seqs, &labels, config.eval_batch)?;
    if !eval.loss.is_finite() || !local.is_finite() {
        return Err(Error::NonFinite(format!("client {client} diverged in round {round}")));
    }
    let header = UpdateHeader {
        client_id: client as u32,
        round: round as u32,
        sample_count: shard.len() as u64,
        final_loss: eval.loss,
    };
    let delta = local.delta_from(global)?;
    let update = serialize_sparse(&delta, &mask, &sent.scores, header)?;
    Ok(LocalResult {
        update,
        importance: alpha,
        mask,
        trained: local,
    })
}

/// Server state between rounds.
pub struct Simulation {
    pub config: ExperimentConfig,
    pub model: Model,
    pub train: Dataset,
    pub val: Dataset,
    pub partition: Partition,
    pub shards: Vec<Dataset>,
    pub global: GlobalState,
    pub ledger: ClientLedger,
    pub initial: Evaluation,
    arch: ArchSpec,
    selection_rng: ChaCha8Rng,
    pool: rayon::ThreadPool,
}

impl Simulation {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let model = Model::new(&config.model, derive_seed(seed, &[stream::BACKBONE]))?;
        let all = generate(
            &config.task,
            config.train_samples + config.val_samples,
            derive_seed(seed, &[stream::DATA]),
        )?;
        let (train, val) = all.split(config.train_samples)?;
        let part_seed = derive_seed(seed, &[stream::PARTITION]);
        let partition = match config.partition {
            PartitionMode::Iid => partition_iid(train.len(), config.clients, part_seed)?,
            PartitionMode::Dirichlet => partition_dirichlet(
                &train.labels(),
                config.task.classes,
                config.clients,
                config.dirichlet_alpha,
                part_seed,
            )?,
        };
        let shards = partition.shards.iter().map(|s| train.subset(s)).collect();
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::ADAPTER]));
        let adapter = LoraAdapter::init(&config.model, &mut init_rng);
        let global = GlobalState::new(adapter, config.server_lr, config.epsilon)?;
        let initial = model.evaluate(&global.adapter, &val.sequences(), &val.labels(), config.eval_batch)?;
        let mut ledger = ClientLedger::new(config.clients);
        ledger.set_global_loss(initial.loss)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::config(format!("threads: {e}")))?;
        Ok(Self {
            arch: ArchSpec::from_model(&config.model),
            selection_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::SELECTION])),
            config,
            model,
            train,
            val,
            partition,
            shards,
            global,
            ledger,
            initial,
            pool,
        })
    }

    pub fn round(&self) -> usize {
        self.global.round
    }

    pub fn evaluate(&self) -> Result<Evaluation> {
        self.model.evaluate(
            &self.global.adapter,
            &self.val.sequences(),
            &self.val.labels(),
            self.config.eval_batch,
        )
    }

    pub fn select(&mut self) -> Result<Vec<usize>> {
        match self.config.selection {
            SelectionMode::Loss => select_top_k(&self.ledger, self.config.per_round),
            SelectionMode::Random => select_random(self.config.clients, self.config.per_round, &mut self.selection_rng),
        }
    }

    /// Runs the selected clients in parallel and returns their results in
    /// client-id order.
    pub fn train_clients(&self, selected: &[usize]) -> Result<Vec<LocalResult>> {
        let round = self.global.round;
        let mut results: Vec<(usize, Result<LocalResult>)> = self.pool.install(|| {
            selected
                .par_iter()
                .map(|&c| {
                    (
                        c,
                        local_train(&self.model, &self.config, c, &self.shards[c], &self.global.adapter, round),
                    )
                })
                .collect()
        });
        results.sort_by_key(|(c, _)| *c);
        results.into_iter().map(|(_, r)| r).collect()
    }

    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let start = Instant::now();
        let selected = self.select()?;
        let results = self.train_clients(&selected)?;
        let mut received = Vec::with_capacity(results.len());
        let mut clients = Vec::with_capacity(results.len());
        for res in results {
            let wire = res.update.encode();
            let update = ClientUpdate::decode(&wire)?;
            let kept = res.mask.kept_count();
            let total_heads = self.arch.layers * self.arch.heads;
            let ops = ops_for_kept(
                &self.arch,
                PeftMethod::Lora,
                kept,
                (total_heads - kept) as f64 / total_heads as f64,
                OpsConvention::StandardMac,
                PruneAccounting::HeadSkip,
            )?
            .total;
            let samples = update.header.sample_count as usize;
            clients.push(ClientMetrics {
                client: update.header.client_id as usize,
                samples,
                final_loss: update.header.final_loss,
                kept_heads: kept,
                bytes: wire.len() as u64,
                ops_per_sequence: ops,
                train_ops: ops * (self.config.local_epochs * samples) as f64,
                importance: res.importance.scores,
            });
            received.push(update);
        }
        self.global = aggregate(&self.global, &received, self.config.aggregation)?;
        if !self.global.adapter.is_finite() {
            return Err(Error::NonFinite(format!("global model after round {}", self.global.round)));
        }
        for u in &received {
            self.ledger.record(
                u.header.client_id as usize,
                u.header.final_loss,
                u.header.round as usize,
            )?;
        }
        let eval = self.evaluate()?;
        self.ledger.set_global_loss(eval.loss)?;
        Ok(RoundMetrics {
            round: self.global.round,
            selected,
            accuracy: eval.accuracy,
            loss: eval.loss,
            bytes: clients.iter().map(|c| c.bytes).sum(),
            train_ops: clients.iter().map(|c| c.train_ops).sum(),
            clients,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub initial: Evaluation,
    pub rounds: Vec<RoundMetrics>,
    pub convergence_round: Option<usize>,
    pub final_adapter: LoraAdapter,
}

impl ExperimentResult {
    pub fn final_accuracy(&self) -> f64 {
        self.rounds.last().map_or(self.initial.accuracy, |r| r.accuracy)
    }
}

/// First round whose accuracy reaches `threshold`.
pub fn convergence_round(rounds: &[RoundMetrics], threshold: f64) -> Option<usize> {
    rounds.iter().find(|r| r.accuracy >= threshold).map(|r| r.round)
}

/// Runs all rounds, calling `observe` after each one. An error from a round
/// or from `observe` stops the run; metrics already observed stay observed.
pub fn run_experiment_with<F>(config: &ExperimentConfig, mut observe: F) -> Result<ExperimentResult>
where
    F: FnMut(&RoundMetrics, &Simulation) -> Result<()>,
{
    let mut sim = Simulation::new(config.clone())?;
    let mut rounds = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        let m = sim.run_round()?;
        observe(&m, &sim)?;
        rounds.push(m);
    }
    Ok(ExperimentResult {
        convergence_round: convergence_round(&rounds, config.accuracy_threshold),
        config: config.clone(),
        initial: sim.initial,
        rounds,
        final_adapter: sim.global.adapter,
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    run_experiment_with(config, |_, _| Ok(()))
}
