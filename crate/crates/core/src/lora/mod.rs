//! LoRA adapters on the query/key/value projections.
//!
//! Projections use the column-vector convention `y = W·x`, so `W` is
//! `[d_out × d_in]`, `A` is `[r × d]` and `B` is `[d × r]`. The output
//! rows of `B` line up with attention-head columns: head `h` owns rows
//! `[h·d/H, (h+1)·d/H)` of every `B`. Only those blocks are ever pruned.

pub mod wire;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

pub use wire::{serialize_sparse, ClientUpdate, ProjectionDelta, UpdateHeader, UpdateLayout};

/// Standard deviation of the task-head initialisation.
pub const HEAD_INIT_STD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Projection {
    Query,
    Key,
    Value,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Query, Projection::Key, Projection::Value];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraPair {
    /// `[r × d]`
    pub a: Tensor,
    /// `[d × r]`
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAdapter {
    pub query: LoraPair,
    pub key: LoraPair,
    pub value: LoraPair,
}

impl LayerAdapter {
    pub fn get(&self, proj: Projection) -> &LoraPair {
        match proj {
            Projection::Query => &self.query,
            Projection::Key => &self.key,
            Projection::Value => &self.value,
        }
    }

    pub fn get_mut(&mut self, proj: Projection) -> &mut LoraPair {
        match proj {
            Projection::Query => &mut self.query,
            Projection::Key => &mut self.key,
            Projection::Value => &mut self.value,
        }
    }
}

/// The trainable set: one LoRA pair per targeted projection plus the task head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub layers: Vec<LayerAdapter>,
    /// Task head `[d × C]`; logits are `pooled · head`.
    pub head: Tensor,
}

impl LoraAdapter {
    /// `A ~ N(0, 1/d)`, `B = 0`, head `~ N(0, HEAD_INIT_STD²)`.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let d = config.hidden;
        let r = config.rank;
        let a_std = 1.0 / (d as f64).sqrt();
        let pair = |rng: &mut R| LoraPair {
            a: Tensor::randn(&[r, d], a_std, rng),
            b: Tensor::zeros(&[d, r]),
        };
        let layers = (0..config.layers)
            .map(|_| LayerAdapter {
                query: pair(rng),
                key: pair(rng),
                value: pair(rng),
            })
            .collect();
        let head = Tensor::randn(&[d, config.classes], HEAD_INIT_STD, rng);
        Self { layers, head }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let (d, r) = (config.hidden, config.rank);
        let pair = || LoraPair {
            a: Tensor::zeros(&[r, d]),
            b: Tensor::zeros(&[d, r]),
        };
        Self {
            layers: (0..config.layers)
                .map(|_| LayerAdapter {
                    query: pair(),
                    key: pair(),
                    value: pair(),
                })
                .collect(),
            head: Tensor::zeros(&[d, config.classes]),
        }
    }

    /// All tensors in canonical order: per layer Q.a, Q.b, K.a, K.b, V.a, V.b; then head.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 6 + 1);
        for layer in &self.layers {
            for proj in Projection::ALL {
                let pair = layer.get(proj);
                out.push(&pair.a);
                out.push(&pair.b);
            }
        }
        out.push(&self.head);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 6 + 1);
        for layer in &mut self.layers {
            for pair in [&mut layer.query, &mut layer.key, &mut layer.value] {
                out.push(&mut pair.a);
                out.push(&mut pair.b);
            }
        }
        out.push(&mut self.head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self - other`, tensor by tensor.
    pub fn delta_from(&self, other: &LoraAdapter) -> Result<LoraAdapter> {
        let mut out = self.clone();
        for (o, src) in out.tensors_mut().into_iter().zip(other.tensors()) {
            o.axpy(-1.0, src)?;
        }
        Ok(out)
    }

    /// In-place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &LoraAdapter) -> Result<()> {
        for (o, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            o.axpy(alpha, src)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// `W·x + B·(A·x)` for a batch of row vectors `x` (`[m × d_in]`).
///
/// `B·A` is never formed; the rank-`r` intermediate is `[m × r]`.
pub fn apply_lora(x: &Tensor, w: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let base = x.matmul_t(w)?;
    let low = x.matmul_t(a)?;
    let delta = low.matmul_t(b)?;
    base.add(&delta)
}

/// Row-block of `b` owned by head `h`, as a contiguous slice of
/// `(d/H)·r` values (rows `[h·d/H, (h+1)·d/H)`).
pub fn head_slice(b: &Tensor, heads: usize, h: usize) -> Result<&[f64]> {
    let rows = b.shape().first().copied().unwrap_or(0);
    if heads == 0 || rows % heads != 0 {
        return Err(Error::input(format!("{rows} rows not divisible by {heads} heads")));
    }
    if h >= heads {
        return Err(Error::input(format!("head {h} out of range for {heads} heads")));
    }
    let block = rows / heads * b.cols();
    Ok(&b.data()[h * block..(h + 1) * block])
}

fn head_slice_mut(b: &mut Tensor, heads: usize, h: usize) -> &mut [f64] {
    let block = b.shape()[0] / heads * b.cols();
    &mut b.data_mut()[h * block..(h + 1) * block]
}

/// Which heads each layer keeps training and transmitting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    layers: usize,
    heads: usize,
    /// `keep[l·H + h]`; false means pruned.
    keep: Vec<bool>,
}

impl PruneMask {
    pub fn keep_all(layers: usize, heads: usize) -> Self {
        Self {
            layers,
            heads,
            keep: vec![true; layers * heads],
        }
    }

    pub fn from_keep(layers: usize, heads: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != layers * heads {
            return Err(Error::input(format!(
                "mask has {} flags, expected {}",
                keep.len(),
                layers * heads
            )));
        }
        Ok(Self { layers, heads, keep })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn is_kept(&self, layer: usize, head: usize) -> bool {
        self.keep[layer * self.heads + head]
    }

    pub fn flags(&self) -> &[bool] {
        &self.keep
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }

    pub fn pruned_count(&self) -> usize {
        self.keep.len() - self.kept_count()
    }

    pub fn kept_in_layer(&self, layer: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.heads).filter(move |&h| self.is_kept(layer, h))
    }

    /// Fraction of pruned heads.
    pub fn sparsity(&self) -> f64 {
        self.pruned_count() as f64 / self.keep.len() as f64
    }
}

/// Zeroes the `B` gradient blocks of pruned heads in all three projections.
/// `A` and the task head are left untouched.
pub fn freeze_pruned(grads: &mut LoraAdapter, mask: &PruneMask) -> Result<()> {
    if grads.layers.len() != mask.layers {
        return Err(Error::input(format!(
            "mask covers {} layers, adapter has {}",
            mask.layers,
            grads.layers.len()
        )));
    }
    for (l, layer) in grads.layers.iter_mut().enumerate() {
        for proj in Projection::ALL {
            let b = &mut layer.get_mut(proj).b;
            if b.shape()[0] % mask.heads != 0 {
                return Err(Error::input("B rows not divisible by mask heads"));
            }
            for h in 0..mask.heads {
                if !mask.is_kept(l, h) {
                    head_slice_mut(b, mask.heads, h).fill(0.0);
                }
            }
        }
    }
    Ok(())
}
