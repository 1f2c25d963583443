//! Per-head confidence scores and sparsity-driven pruning masks.
//!
//! A head's score is the dataset average of its per-row maximum attention.
//! EOS is removed on both sides: EOS query rows are skipped and each
//! remaining row is renormalized over the non-EOS keys before the max.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, PruneMask};
use crate::model::{AttentionTrace, Batch, Model};

/// Guards `floor(s·L·H)` against `0.3·10 = 2.9999…` style rounding.
const COUNT_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Maximum softmax probability, in `[0, 1]`.
    #[default]
    PostSoftmax,
    /// Maximum scaled `q·k` score before softmax. Unbounded and possibly
    /// negative, so it is only usable for pruning, not as a merge weight.
    PreSoftmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMatrix {
    pub layers: usize,
    pub heads: usize,
    /// `[L·H]`, layer-major.
    pub scores: Vec<f64>,
    pub client_id: usize,
    pub round: usize,
    pub dataset_size: usize,
}

impl ImportanceMatrix {
    pub fn new(layers: usize, heads: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != layers * heads {
            return Err(Error::input(format!(
                "{} scores for a {layers}x{heads} matrix",
                scores.len()
            )));
        }
        Ok(Self {
            layers,
            heads,
            scores,
            client_id: 0,
            round: 0,
            dataset_size: 0,
        })
    }

    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.scores[layer * self.heads + head]
    }

    /// Euclidean distance between two score matrices of the same shape.
    pub fn distance(&self, other: &ImportanceMatrix) -> Result<f64> {
        if self.scores.len() != other.scores.len() {
            return Err(Error::input("importance matrices differ in shape"));
        }
        Ok(self
            .scores
            .iter()
            .zip(&other.scores)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

/// Running per-head sums of per-sample scores.
#[derive(Debug, Clone)]
pub struct ImportanceAccumulator {
    layers: usize,
    heads: usize,
    eos: u32,
    kind: ScoreKind,
    sums: Vec<f64>,
    samples: usize,
}

impl ImportanceAccumulator {
    pub fn new(layers: usize, heads: usize, eos: u32, kind: ScoreKind) -> Self {
        Self {
            layers,
            heads,
            eos,
            kind,
            sums: vec![0.0; layers * heads],
            samples: 0,
        }
    }

    fn row_score(&self, trace: &AttentionTrace, l: usize, s: usize, h: usize, q: usize) -> f64 {
        let keys = (0..trace.seq_len).filter(|&j| trace.is_valid(s, j) && trace.token(s, j) != self.eos);
        match self.kind {
            ScoreKind::PostSoftmax => {
                let row = trace.row(l, s, h, q);
                let mut total = 0.0;
                let mut best = 0.0f64;
                for j in keys {
                    total += row[j];
                    best = best.max(row[j]);
                }
                if total > 0.0 {
                    best / total
                } else {
                    0.0
                }
            }
            ScoreKind::PreSoftmax => {
                let row = trace.score_row(l, s, h, q);
                keys.map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max)
            }
        }
    }

    /// Adds every sample of `trace` that has at least one non-EOS token.
    pub fn add(&mut self, trace: &AttentionTrace) -> Result<()> {
        if trace.layers() != self.layers || trace.heads != self.heads {
            return Err(Error::input("trace does not match importance layout"));
        }
        for s in 0..trace.samples {
            let queries: Vec<usize> = (0..trace.seq_len)
                .filter(|&i| trace.is_valid(s, i) && trace.token(s, i) != self.eos)
                .collect();
            if queries.is_empty() {
                continue;
            }
            for l in 0..self.layers {
                for h in 0..self.heads {
                    let total: f64 = queries.iter().map(|&q| self.row_score(trace, l, s, h, q)).sum();
                    self.sums[l * self.heads + h] += total / queries.len() as f64;
                }
            }
            self.samples += 1;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<ImportanceMatrix> {
        if self.samples == 0 {
            return Err(Error::input("no sample with a non-EOS token to score"));
        }
        let n = self.samples as f64;
        let mut m = ImportanceMatrix::new(self.layers, self.heads, self.sums.into_iter().map(|v| v / n).collect())?;
        m.dataset_size = self.samples;
        Ok(m)
    }
}

/// Scores every head of `adapter` on `sequences` with forward passes only.
pub fn compute_importance<S: AsRef<[u32]>>(
    model: &Model,
    adapter: &LoraAdapter,
    sequences: &[S],
    kind: ScoreKind,
    batch_size: usize,
) -> Result<ImportanceMatrix> {
    if sequences.is_empty() {
        return Err(Error::input("importance needs a non-empty dataset"));
    }
    let cfg = model.config();
    let mut acc = ImportanceAccumulator::new(cfg.layers, cfg.heads, cfg.eos_token, kind);
    for chunk in sequences.chunks(batch_size.max(1)) {
        let batch = Batch::new(chunk, cfg.max_len)?;
        acc.add(&model.forward(adapter, &batch)?.trace)?;
    }
    let mut m = acc.finish()?;
    m.dataset_size = sequences.len();
    Ok(m)
}

/// `⌊sparsity·L·H⌋`, capped so one head always survives.
pub fn pruned_count(layers: usize, heads: usize, sparsity: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::input(format!("sparsity {sparsity} outside [0, 1)")));
    }
    let total = layers * heads;
    let n = (sparsity * total as f64 + COUNT_SLACK).floor() as usize;
    Ok(n.min(total.saturating_sub(1)))
}

/// Prunes the lowest-scoring heads across all layers. Ties go to the lower
/// `(layer, head)` index. Pruned scores are zeroed in the returned matrix.
pub fn prune_by_sparsity(alpha: &ImportanceMatrix, sparsity: f64) -> Result<(PruneMask, ImportanceMatrix)> {
    let n = pruned_count(alpha.layers, alpha.heads, sparsity)?;
    if alpha.scores.iter().any(|s| s.is_nan()) {
        return Err(Error::input("importance contains NaN"));
    }
    let mut order: Vec<usize> = (0..alpha.scores.len()).collect();
    order.sort_by(|&a, &b| alpha.scores[a].total_cmp(&alpha.scores[b]).then(a.cmp(&b)));
    let mut keep = vec![true; alpha.scores.len()];
    for &i in &order[..n] {
        keep[i] = false;
    }
    apply_mask(alpha, keep)
}

/// Prunes a uniformly random set of `⌊sparsity·L·H⌋` heads.
pub fn prune_random<R: Rng + ?Sized>(
    alpha: &ImportanceMatrix,
    sparsity: f64,
    rng: &mut R,
) -> Result<(PruneMask, ImportanceMatrix)> {
    let total = alpha.layers * alpha.heads;
    let n = pruned_count(alpha.layers, alpha.heads, sparsity)?;
    let mut keep = vec![true; total];
    for i in rand::seq::index::sample(rng, total, n) {
        keep[i] = false;
    }
    apply_mask(alpha, keep)
}

fn apply_mask(alpha: &ImportanceMatrix, keep: Vec<bool>) -> Result<(PruneMask, ImportanceMatrix)> {
    let mut out = alpha.clone();
    for (s, k) in out.scores.iter_mut().zip(&keep) {
        if !k {
            *s = 0.0;
        }
    }
    Ok((PruneMask::from_keep(alpha.layers, alpha.heads, keep)?, out))
}
