use serde::{Deserialize, Serialize};

use crate::aggregate::AggregationMode;
use crate::data::SyntheticTask;
use crate::error::{Error, Result};
use crate::importance::ScoreKind;
use crate::model::ModelConfig;
use crate::selection::SelectionMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruningMode {
    /// Every head trains; `sparsity` is ignored.
    #[default]
    None,
    Random,
    Importance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    #[default]
    Iid,
    Dirichlet,
}

/// Everything that determines a run. Every field has a default, so an
/// empty document is a valid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub task: SyntheticTask,
    /// Total clients `N`.
    pub clients: usize,
    /// Clients per round `K`.
    pub per_round: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub local_lr: f64,
    pub sparsity: f64,
    pub selection: SelectionMode,
    pub aggregation: AggregationMode,
    pub pruning: PruningMode,
    pub importance: ScoreKind,
    pub server_lr: f64,
    pub epsilon: f64,
    pub train_samples: usize,
    /// Server-held split used for the global loss and accuracy.
    pub val_samples: usize,
    pub partition: PartitionMode,
    pub dirichlet_alpha: f64,
    /// Accuracy that counts as converged.
    pub accuracy_threshold: f64,
    /// Chunk size for forward-only passes (importance and evaluation).
    pub eval_batch: usize,
    /// Worker threads for client training; 0 uses all cores.
    pub threads: usize,
    /// Write a checkpoint every this many rounds; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            task: SyntheticTask::default(),
            clients: 8,
            per_round: 2,
            rounds: 100,
            local_epochs: 1,
            batch_size: 16,
            local_lr: 5e-4,
            sparsity: 0.0,
            selection: SelectionMode::Loss,
            aggregation: AggregationMode::Weighted,
            pruning: PruningMode::None,
            importance: ScoreKind::PostSoftmax,
            server_lr: 1.0,
            epsilon: 1e-8,
            train_samples: 960,
            val_samples: 300,
            partition: PartitionMode::Iid,
            dirichlet_alpha: 0.5,
            accuracy_threshold: 0.9,
            eval_batch: 64,
            threads: 0,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Sparsity actually applied: zero when pruning is off.
    pub fn effective_sparsity(&self) -> f64 {
        match self.pruning {
            PruningMode::None => 0.0,
            _ => self.sparsity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        let bad = |field: &str, msg: &str| Err(Error::config(format!("{field}: {msg}")));
        let (m, t) = (&self.model, &self.task);
        if t.vocab != m.vocab {
            return bad("task.vocab", "must equal model.vocab");
        }
        if t.classes != m.classes {
            return bad("task.classes", "must equal model.classes");
        }
        if t.eos_token != m.eos_token {
            return bad("task.eos_token", "must equal model.eos_token");
        }
        if t.max_len + 1 > m.max_len {
            return bad("task.max_len", "plus EOS must fit in model.max_len");
        }
        if self.clients == 0 {
            return bad("clients", "must be at least 1");
        }
        if self.per_round == 0 || self.per_round > self.clients {
            return bad("per_round", "must be between 1 and clients");
        }
        if self.train_samples < self.clients || self.train_samples < t.classes {
            return bad("train_samples", "must cover every client and class");
        }
        if self.val_samples < t.classes {
            return bad("val_samples", "must be at least the class count");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.eval_batch == 0 {
            return bad("eval_batch", "must be at least 1");
        }
        if !(self.local_lr > 0.0 && self.local_lr.is_finite()) {
            return bad("local_lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return bad("sparsity", "must lie in [0, 1)");
        }
        if !(self.server_lr > 0.0 && self.server_lr.is_finite()) {
            return bad("server_lr", "must be positive");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon", "must be positive");
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return bad("dirichlet_alpha", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.accuracy_threshold) {
            return bad("accuracy_threshold", "must lie in [0, 1]");
        }
        if self.importance == ScoreKind::PreSoftmax && self.aggregation == AggregationMode::Weighted {
            return bad(
                "importance",
                "pre_softmax scores can be negative and cannot weight aggregation; use aggregation = \"fedavg\"",
            );
        }
        Ok(())
    }
}
