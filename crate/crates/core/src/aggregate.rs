//! Server-side merge of client updates.
//!
//! `A` and the task head are always merged by sample-count FedAvg. `B` is
//! merged per head block, either by FedAvg or weighted by each sender's
//! importance score. A head block a client did not send counts as a zero
//! delta with zero weight.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::wire::ClientUpdate;
use crate::lora::{LoraAdapter, Projection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Sample-count averaging for every parameter.
    Fedavg,
    /// Importance-weighted averaging for `B`, sample-count for the rest.
    #[default]
    Weighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub adapter: LoraAdapter,
    pub round: usize,
    pub server_lr: f64,
    pub epsilon: f64,
}

impl GlobalState {
    pub fn new(adapter: LoraAdapter, server_lr: f64, epsilon: f64) -> Result<Self> {
        if !(server_lr > 0.0 && server_lr.is_finite()) {
            return Err(Error::config("server learning rate must be positive"));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::config("aggregation epsilon must be positive"));
        }
        Ok(Self {
            adapter,
            round: 0,
            server_lr,
            epsilon,
        })
    }
}

fn heads_of(state: &GlobalState, updates: &[&ClientUpdate]) -> Result<usize> {
    let first = updates
        .first()
        .ok_or_else(|| Error::protocol("no client updates to merge"))?;
    let a = &state.adapter;
    let lay = first.layout;
    let rank = a.layers.first().map_or(0, |l| l.query.a.rows());
    if lay.layers != a.layers.len()
        || lay.classes != a.head.cols()
        || lay.hidden != a.head.rows()
        || lay.rank != rank
    {
        return Err(Error::protocol("update layout does not match the global adapter"));
    }
    for u in updates {
        if u.layout != lay {
            return Err(Error::protocol("updates disagree on layout"));
        }
        if u.header.round != first.header.round {
            return Err(Error::protocol(format!(
                "updates from rounds {} and {} mixed",
                first.header.round, u.header.round
            )));
        }
    }
    Ok(lay.heads)
}

fn sorted(updates: &[ClientUpdate]) -> Vec<&ClientUpdate> {
    let mut v: Vec<&ClientUpdate> = updates.iter().collect();
    v.sort_by_key(|u| u.header.client_id);
    v
}

fn sample_weights(updates: &[&ClientUpdate]) -> Result<Vec<f64>> {
    let total: u64 = updates.iter().map(|u| u.header.sample_count).sum();
    if total == 0 {
        return Err(Error::protocol("updates report zero samples in total"));
    }
    Ok(updates
        .iter()
        .map(|u| u.header.sample_count as f64 / total as f64)
        .collect())
}

/// Sample-count FedAvg of `ΔA` and `Δhead`: `Φ ← Φ + η·Σ|D_c|·ΔΦ_c / Σ|D_c|`.
pub fn fedavg_merge(state: &GlobalState, updates: &[ClientUpdate]) -> Result<GlobalState> {
    let ups = sorted(updates);
    heads_of(state, &ups)?;
    let w = sample_weights(&ups)?;
    let eta = state.server_lr;
    let mut next = state.clone();
    for (l, layer) in next.adapter.layers.iter_mut().enumerate() {
        for (p, proj) in Projection::ALL.into_iter().enumerate() {
            let a = layer.get_mut(proj).a.data_mut();
            for (i, slot) in a.iter_mut().enumerate() {
                let mean: f64 = ups.iter().zip(&w).map(|(u, wc)| wc * u.layers[l][p].a[i]).sum();
                *slot += eta * mean;
            }
        }
    }
    for (i, slot) in next.adapter.head.data_mut().iter_mut().enumerate() {
        let mean: f64 = ups.iter().zip(&w).map(|(u, wc)| wc * u.head[i]).sum();
        *slot += eta * mean;
    }
    Ok(next)
}

fn check_alignment(update: &ClientUpdate, heads: usize) -> Result<()> {
    for (i, &alpha) in update.importance.iter().enumerate() {
        if alpha.is_nan() || alpha < 0.0 {
            return Err(Error::input(format!(
                "client {} sent invalid importance {alpha}",
                update.header.client_id
            )));
        }
        let (l, h) = (i / heads, i % heads);
        if alpha > 0.0 && update.b_block(l, Projection::Query, h).is_none() {
            return Err(Error::protocol(format!(
                "client {} weights head ({l}, {h}) without sending its block",
                update.header.client_id
            )));
        }
    }
    Ok(())
}

/// Per-head `B` merge. `weight(c, l, h)` gives each sender's weight for the
/// block; the denominator is `Σ weight + extra`.
fn merge_blocks(
    state: &GlobalState,
    ups: &[&ClientUpdate],
    heads: usize,
    weight: impl Fn(usize, usize, usize) -> f64,
    extra: f64,
) -> GlobalState {
    let eta = state.server_lr;
    let mut next = state.clone();
    for (l, layer) in next.adapter.layers.iter_mut().enumerate() {
        for h in 0..heads {
            let denom: f64 = (0..ups.len()).map(|c| weight(c, l, h)).sum::<f64>() + extra;
            for proj in Projection::ALL {
                let b = &mut layer.get_mut(proj).b;
                let block = b.len() / heads;
                let target = &mut b.data_mut()[h * block..(h + 1) * block];
                for (i, slot) in target.iter_mut().enumerate() {
                    let mut num = 0.0;
                    for (c, u) in ups.iter().enumerate() {
                        if let Some(delta) = u.b_block(l, proj, h) {
                            num += weight(c, l, h) * delta[i];
                        }
                    }
                    if num != 0.0 {
                        *slot += eta * num / denom;
                    }
                }
            }
        }
    }
    next
}

/// `p ← p + η·Σ_c α_c·Δp_c / (Σ_c α_c + ε)` for every `(layer, head)` block of `B`.
pub fn weighted_head_merge(state: &GlobalState, updates: &[ClientUpdate]) -> Result<GlobalState> {
    let ups = sorted(updates);
    let heads = heads_of(state, &ups)?;
    for u in &ups {
        check_alignment(u, heads)?;
    }
    Ok(merge_blocks(
        state,
        &ups,
        heads,
        |c, l, h| ups[c].importance_at(l, h),
        state.epsilon,
    ))
}

/// Sample-count FedAvg of the `B` blocks; unsent blocks count as zero deltas.
pub fn fedavg_head_merge(state: &GlobalState, updates: &[ClientUpdate]) -> Result<GlobalState> {
    let ups = sorted(updates);
    let heads = heads_of(state, &ups)?;
    sample_weights(&ups)?;
    Ok(merge_blocks(
        state,
        &ups,
        heads,
        |c, _, _| ups[c].header.sample_count as f64,
        0.0,
    ))
}

/// One full server step: merges `A`/head by FedAvg and `B` per `mode`,
/// then advances the round counter.
pub fn aggregate(state: &GlobalState, updates: &[ClientUpdate], mode: AggregationMode) -> Result<GlobalState> {
    let shared = fedavg_merge(state, updates)?;
    let mut next = match mode {
        AggregationMode::Fedavg => fedavg_head_merge(&shared, updates)?,
        AggregationMode::Weighted => weighted_head_merge(&shared, updates)?,
    };
    next.round = state.round + 1;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::wire::{serialize_sparse, UpdateHeader};
    use crate::lora::{head_slice, PruneMask};
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            hidden: 4,
            rank: 1,
            classes: 1,
            ..ModelConfig::default()
        }
    }

    fn state() -> GlobalState {
        GlobalState::new(LoraAdapter::zeros(&cfg()), 1.0, 1e-8).unwrap()
    }

    fn filled_delta(v: f64) -> LoraAdapter {
        let mut d = LoraAdapter::zeros(&cfg());
        for t in d.tensors_mut() {
            *t = Tensor::filled(t.shape(), v);
        }
        d
    }

    fn update(id: u32, samples: u64, delta: &LoraAdapter, keep: Vec<bool>, alpha: Vec<f64>) -> ClientUpdate {
        let mask = PruneMask::from_keep(1, 2, keep).unwrap();
        let header = UpdateHeader {
            client_id: id,
            round: 0,
            sample_count: samples,
            final_loss: 0.5,
        };
        serialize_sparse(delta, &mask, &alpha, header).unwrap()
    }

    #[test]
    fn single_client_adds_delta() {
        let u = update(0, 10, &filled_delta(0.5), vec![true, true], vec![1.0, 1.0]);
        let s = fedavg_merge(&state(), &[u]).unwrap();
        assert!(s.adapter.head.data().iter().all(|v| *v == 0.5));
        assert!(s.adapter.layers[0].key.a.data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn opposite_deltas_cancel() {
        let a = update(0, 100, &filled_delta(0.25), vec![true, true], vec![1.0, 1.0]);
        let b = update(1, 100, &filled_delta(-0.25), vec![true, true], vec![1.0, 1.0]);
        let s = aggregate(&state(), &[a, b], AggregationMode::Fedavg).unwrap();
        assert!(s.adapter.tensors().iter().all(|t| t.data().iter().all(|v| *v == 0.0)));
        assert_eq!(s.round, 1);
    }

    #[test]
    fn sample_weighted_mean_by_hand() {
        let a = update(0, 100, &filled_delta(0.4), vec![true, true], vec![1.0, 1.0]);
        let b = update(1, 300, &filled_delta(0.8), vec![true, true], vec![1.0, 1.0]);
        let s = fedavg_merge(&state(), &[a, b]).unwrap();
        // 0.4 and 0.8 round to f32 on the wire.
        let want = 0.25 * (0.4f32 as f64) + 0.75 * (0.8f32 as f64);
        assert!((s.adapter.head.data()[0] - want).abs() < 1e-15);
        assert!((want - 0.7).abs() < 1e-7);
    }

    #[test]
    fn single_source_weighted_divides_by_alpha_plus_eps() {
        let u = update(0, 10, &filled_delta(0.5), vec![true, true], vec![1.0, 1.0]);
        let s = weighted_head_merge(&state(), &[u]).unwrap();
        let want = 0.5 / (1.0 + 1e-8);
        assert!(s.adapter.layers[0].value.b.data().iter().all(|v| (*v - want).abs() < 1e-15));
    }

    #[test]
    fn importance_weighted_mean_by_hand() {
        let st = GlobalState {
            epsilon: 0.0,
            ..state()
        };
        let a = update(0, 10, &filled_delta(1.0), vec![true, true], vec![0.6, 0.6]);
        let b = update(1, 10, &filled_delta(-1.0), vec![true, true], vec![0.4, 0.4]);
        // Weights passed in f64 to avoid the f32 rounding of the wire copy.
        let s = merge_blocks(&st, &sorted(&[a, b]), 2, |c, _, _| [0.6, 0.4][c], 0.0);
        for v in s.adapter.layers[0].query.b.data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn head_pruned_everywhere_is_untouched() {
        let a = update(0, 10, &filled_delta(1.0), vec![true, false], vec![0.7, 0.0]);
        let b = update(1, 10, &filled_delta(2.0), vec![true, false], vec![0.3, 0.0]);
        let s = weighted_head_merge(&state(), &[a, b]).unwrap();
        let b = s.adapter.layers[0].query.b.data();
        assert!(b[..2].iter().all(|v| *v != 0.0));
        assert_eq!(&b[2..], &[0.0, 0.0]);
    }

    #[test]
    fn partial_pruning_uses_senders_only() {
        let a = update(0, 10, &filled_delta(1.0), vec![false, true], vec![0.0, 0.5]);
        let b = update(1, 10, &filled_delta(3.0), vec![true, true], vec![0.5, 0.5]);
        let st = GlobalState {
            epsilon: 1e-300,
            ..state()
        };
        let s = weighted_head_merge(&st, &[a, b]).unwrap();
        let b = s.adapter.layers[0].query.b.data();
        assert!((b[0] - 3.0).abs() < 1e-12);
        assert!((b[2] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn negative_alpha_is_input_error() {
        let mut u = update(0, 10, &filled_delta(1.0), vec![true, true], vec![0.5, 0.5]);
        u.importance[1] = -0.1;
        assert!(matches!(weighted_head_merge(&state(), &[u]), Err(Error::Input(_))));
    }

    #[test]
    fn alpha_without_block_is_protocol_error() {
        let mut u = update(0, 10, &filled_delta(1.0), vec![true, false], vec![0.5, 0.0]);
        u.importance[1] = 0.2;
        assert!(matches!(weighted_head_merge(&state(), &[u]), Err(Error::Protocol(_))));
    }

    #[test]
    fn empty_and_mixed_rounds_are_protocol_errors() {
        assert!(matches!(fedavg_merge(&state(), &[]), Err(Error::Protocol(_))));
        let a = update(0, 10, &filled_delta(1.0), vec![true, true], vec![0.5, 0.5]);
        let mut b = a.clone();
        b.header.round = 3;
        assert!(matches!(fedavg_merge(&state(), &[a, b]), Err(Error::Protocol(_))));
    }

    #[test]
    fn invalid_state_parameters_are_rejected() {
        assert!(GlobalState::new(LoraAdapter::zeros(&cfg()), 0.0, 1e-8).is_err());
        assert!(GlobalState::new(LoraAdapter::zeros(&cfg()), 1.0, 0.0).is_err());
    }

    fn random_update(id: u32, seed: u64) -> ClientUpdate {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut d = LoraAdapter::zeros(&cfg());
        for t in d.tensors_mut() {
            *t = Tensor::randn(t.shape(), 1.0, &mut rng);
        }
        let keep = vec![rng.random_bool(0.5), true];
        let alpha = keep.iter().map(|k| if *k { rng.random::<f64>() } else { 0.0 }).collect();
        update(id, rng.random_range(1..50), &d, keep, alpha)
    }

    proptest! {
        #[test]
        fn merge_is_order_invariant(s0 in any::<u64>(), s1 in any::<u64>(), s2 in any::<u64>()) {
            let ups = vec![random_update(0, s0), random_update(1, s1), random_update(2, s2)];
            let rev: Vec<ClientUpdate> = ups.iter().rev().cloned().collect();
            for mode in [AggregationMode::Fedavg, AggregationMode::Weighted] {
                prop_assert_eq!(aggregate(&state(), &ups, mode).unwrap(), aggregate(&state(), &rev, mode).unwrap());
            }
        }

        #[test]
        fn weighted_merge_stays_in_convex_hull(s0 in any::<u64>(), s1 in any::<u64>()) {
            let st = GlobalState { epsilon: 1e-300, ..state() };
            let ups = vec![random_update(0, s0), random_update(1, s1)];
            let s = weighted_head_merge(&st, &ups).unwrap();
            for proj in Projection::ALL {
                for h in 0..2 {
                    let senders: Vec<&[f64]> = ups.iter().filter(|u| u.importance_at(0, h) > 0.0).filter_map(|u| u.b_block(0, proj, h)).collect();
                    let merged = head_slice(&s.adapter.layers[0].get(proj).b, 2, h).unwrap();
                    for (i, m) in merged.iter().enumerate() {
                        if senders.is_empty() {
                            prop_assert_eq!(*m, 0.0);
                            continue;
                        }
                        let lo = senders.iter().map(|b| b[i]).fold(f64::INFINITY, f64::min);
                        let hi = senders.iter().map(|b| b[i]).fold(f64::NEG_INFINITY, f64::max);
                        prop_assert!(*m >= lo - 1e-12 && *m <= hi + 1e-12);
                    }
                }
            }
        }

        #[test]
        fn common_alpha_scale_is_invisible_without_epsilon(s0 in any::<u64>(), s1 in any::<u64>(), k in 0.01f64..100.0) {
            let ups = vec![random_update(0, s0), random_update(1, s1)];
            let mut scaled = ups.clone();
            for u in &mut scaled {
                for a in &mut u.importance {
                    *a *= k;
                }
            }
            let st = GlobalState { epsilon: 1e-300, ..state() };
            let a = weighted_head_merge(&st, &ups).unwrap();
            let b = weighted_head_merge(&st, &scaled).unwrap();
            for (x, y) in a.adapter.tensors().iter().zip(b.adapter.tensors()) {
                for (p, q) in x.data().iter().zip(y.data()) {
                    prop_assert!((p - q).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn equal_counts_give_plain_mean(s0 in any::<u64>(), s1 in any::<u64>()) {
            let mut ups = vec![random_update(0, s0), random_update(1, s1)];
            for u in &mut ups {
                u.header.sample_count = 7;
            }
            let s = fedavg_merge(&state(), &ups).unwrap();
            for (i, v) in s.adapter.head.data().iter().enumerate() {
                prop_assert!((v - (ups[0].head[i] + ups[1].head[i]) / 2.0).abs() < 1e-15);
            }
        }
    }
}
