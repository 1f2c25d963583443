use super::*;
use crate::lora::{LayerAdapter, LoraAdapter};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy() -> ModelConfig {
    ModelConfig::default()
}

fn random_adapter(config: &ModelConfig, seed: u64) -> LoraAdapter {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adapter = LoraAdapter::init(config, &mut rng);
    for layer in &mut adapter.layers {
        for proj in Projection::ALL {
            layer.get_mut(proj).b = Tensor::randn(&[config.hidden, config.rank], 0.2, &mut rng);
        }
    }
    adapter.head = Tensor::randn(&[config.hidden, config.classes], 0.3, &mut rng);
    adapter
}

fn random_sequences(config: &ModelConfig, n: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(2..=config.max_len);
            (0..len)
                .map(|_| rng.random_range(2..config.vocab as u32))
                .collect()
        })
        .collect()
}

fn gelu_ref(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn layer_norm_ref(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + crate::tensor::LAYER_NORM_EPS).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect()
}

/// `W·x + B·(A·x)` by explicit loops.
fn project_ref(x: &[f64], w: &Tensor, pair: Option<&LoraPair>) -> Vec<f64> {
    let d = w.rows();
    let mut out: Vec<f64> = (0..d)
        .map(|i| (0..x.len()).map(|j| w.get(i, j) * x[j]).sum())
        .collect();
    if let Some(p) = pair {
        let r = p.a.rows();
        let low: Vec<f64> = (0..r)
            .map(|k| (0..x.len()).map(|j| p.a.get(k, j) * x[j]).sum())
            .collect();
        for (i, o) in out.iter_mut().enumerate() {
            *o += (0..r).map(|k| p.b.get(i, k) * low[k]).sum::<f64>();
        }
    }
    out
}

/// Single-sequence forward pass written without the tape or batching.
fn logits_ref(bb: &Backbone, adapter: Option<&LoraAdapter>, head: &Tensor, seq: &[u32]) -> Vec<f64> {
    let c = &bb.config;
    let (d, h) = (c.hidden, c.heads);
    let dh = d / h;
    let t = seq.len();
    let mut x: Vec<Vec<f64>> = seq
        .iter()
        .enumerate()
        .map(|(p, &tok)| {
            (0..d)
                .map(|i| bb.embedding.get(tok as usize, i) * (d as f64).sqrt() + bb.positional.get(p, i))
                .collect()
        })
        .collect();
    for (l, layer) in bb.layers.iter().enumerate() {
        let normed: Vec<Vec<f64>> = x
            .iter()
            .map(|r| layer_norm_ref(r, layer.ln1_gain.data(), layer.ln1_bias.data()))
            .collect();
        let pair = |p: Projection| adapter.map(|a| a.layers[l].get(p));
        let q: Vec<Vec<f64>> = normed.iter().map(|r| project_ref(r, &layer.w_q, pair(Projection::Query))).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|r| project_ref(r, &layer.w_k, pair(Projection::Key))).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|r| project_ref(r, &layer.w_v, pair(Projection::Value))).collect();
        let mut concat = vec![vec![0.0; d]; t];
        for head in 0..h {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    concat[i][c] = (0..t).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
        for i in 0..t {
            let o = project_ref(&concat[i], &layer.w_o, None);
            for c in 0..d {
                x[i][c] += o[c];
            }
            let n2 = layer_norm_ref(&x[i], layer.ln2_gain.data(), layer.ln2_bias.data());
            let hidden: Vec<f64> = (0..c.ffn)
                .map(|f| gelu_ref((0..d).map(|j| n2[j] * layer.ffn_in.get(j, f)).sum()))
                .collect();
            for cc in 0..d {
                x[i][cc] += (0..c.ffn).map(|f| hidden[f] * layer.ffn_out.get(f, cc)).sum::<f64>();
            }
        }
    }
    let mut pooled = vec![0.0; d];
    for r in &x {
        let n = layer_norm_ref(r, bb.final_gain.data(), bb.final_bias.data());
        for i in 0..d {
            pooled[i] += n[i] / t as f64;
        }
    }
    (0..c.classes)
        .map(|k| (0..d).map(|i| pooled[i] * head.get(i, k)).sum())
        .collect()
}

#[test]
fn default_config_is_valid() {
    let c = toy();
    c.validate().unwrap();
    assert_eq!(c.head_dim(), 8);
}

#[test]
fn config_rejects_indivisible_heads_and_zero_sizes() {
    let c = ModelConfig { heads: 5, ..toy() };
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let c = ModelConfig { rank: 0, ..toy() };
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let c = ModelConfig { eos_token: 32, ..toy() };
    assert!(c.validate().is_err());
}

#[test]
fn config_toml_style_defaults_fill_missing_fields() {
    let c: ModelConfig = serde_json::from_str(r#"{"layers": 3}"#).unwrap();
    assert_eq!(c.layers, 3);
    assert_eq!(c.hidden, 32);
    assert!(serde_json::from_str::<ModelConfig>(r#"{"layerz": 3}"#).is_err());
}

#[test]
fn backbone_init_is_deterministic_in_seed() {
    let a = Backbone::init(&toy(), 7).unwrap();
    let b = Backbone::init(&toy(), 7).unwrap();
    let c = Backbone::init(&toy(), 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.embedding, c.embedding);
}

#[test]
fn sinusoidal_table_first_rows() {
    let t = sinusoidal_table(4, 6);
    assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    assert!((t.get(1, 0) - 1f64.sin()).abs() < 1e-15);
    assert!((t.get(1, 3) - (1.0 / 10000f64.powf(2.0 / 6.0)).cos()).abs() < 1e-15);
}

#[test]
fn batch_pads_to_longest_and_rejects_overlong() {
    let b = Batch::new(&[vec![3u32, 4], vec![5, 6, 7]], 16).unwrap();
    assert_eq!(b.seq_len, 3);
    assert_eq!(b.tokens, vec![3, 4, 0, 5, 6, 7]);
    assert_eq!(b.mask, vec![true, true, false, true, true, true]);
    assert_eq!(b.len(), 2);
    assert!(Batch::new(&[vec![1u32; 17]], 16).is_err());
    assert!(Batch::new::<Vec<u32>>(&[], 16).is_err());
    assert!(Batch::new(&[Vec::<u32>::new()], 16).is_err());
}

#[test]
fn forward_matches_loop_reference() {
    let c = toy();
    let model = Model::new(&c, 11).unwrap();
    let adapter = random_adapter(&c, 12);
    let seqs = random_sequences(&c, 5, 13);
    let batch = Batch::new(&seqs, c.max_len).unwrap();
    let out = model.forward(&adapter, &batch).unwrap();
    assert_eq!(out.logits.shape(), &[5, 3]);
    for (i, s) in seqs.iter().enumerate() {
        let want = logits_ref(model.backbone(), Some(&adapter), &adapter.head, s);
        for k in 0..3 {
            assert!(
                (out.logits.get(i, k) - want[k]).abs() < 1e-10,
                "sample {i} class {k}: {} vs {}",
                out.logits.get(i, k),
                want[k]
            );
        }
    }
}

#[test]
fn padding_does_not_change_logits() {
    let c = toy();
    let model = Model::new(&c, 1).unwrap();
    let adapter = random_adapter(&c, 2);
    let short = vec![4u32, 5, 6, 1];
    let long = vec![7u32; 12];
    let alone = model.forward(&adapter, &Batch::new(&[short.clone()], 16).unwrap()).unwrap();
    let padded = model.forward(&adapter, &Batch::new(&[short, long], 16).unwrap()).unwrap();
    for k in 0..3 {
        assert!((alone.logits.get(0, k) - padded.logits.get(0, k)).abs() < 1e-12);
    }
}

#[test]
fn zero_b_is_bit_identical_to_backbone_only() {
    let c = toy();
    let model = Model::new(&c, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let adapter = LoraAdapter::init(&c, &mut rng);
    let batch = Batch::new(&random_sequences(&c, 6, 5), c.max_len).unwrap();
    let with = model.forward(&adapter, &batch).unwrap();
    let without = model.forward_backbone_only(&adapter.head, &batch).unwrap();
    assert_eq!(with.logits.data(), without.logits.data());
    assert_eq!(with.trace.probs, without.trace.probs);
}

#[test]
fn trace_rows_are_distributions_over_valid_keys() {
    let c = toy();
    let model = Model::new(&c, 3).unwrap();
    let adapter = random_adapter(&c, 4);
    let batch = Batch::new(&random_sequences(&c, 4, 6), c.max_len).unwrap();
    let trace = model.forward(&adapter, &batch).unwrap().trace;
    assert_eq!(trace.layers(), 2);
    for l in 0..2 {
        for s in 0..4 {
            for h in 0..4 {
                for q in 0..trace.seq_len {
                    let row = trace.row(l, s, h, q);
                    let total: f64 = row.iter().sum();
                    assert!((total - 1.0).abs() < 1e-12);
                    for (j, p) in row.iter().enumerate() {
                        if !trace.is_valid(s, j) {
                            assert_eq!(*p, 0.0);
                            assert_eq!(trace.score_row(l, s, h, q)[j], f64::NEG_INFINITY);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn out_of_vocab_token_is_rejected() {
    let c = toy();
    let model = Model::new(&c, 3).unwrap();
    let adapter = LoraAdapter::zeros(&c);
    let batch = Batch::new(&[vec![2u32, 40]], 16).unwrap();
    assert!(matches!(model.forward(&adapter, &batch), Err(Error::Input(_))));
}

#[test]
fn mismatched_adapter_is_rejected() {
    let c = toy();
    let model = Model::new(&c, 3).unwrap();
    let other = ModelConfig { rank: 2, ..toy() };
    let adapter = LoraAdapter::zeros(&other);
    let batch = Batch::new(&[vec![2u32, 3]], 16).unwrap();
    assert!(model.forward(&adapter, &batch).is_err());
}

fn loss_of(model: &Model, adapter: &LoraAdapter, batch: &Batch, labels: &[usize]) -> f64 {
    model.forward(adapter, batch).unwrap().logits.cross_entropy(labels).unwrap()
}

#[test]
fn gradients_match_central_differences() {
    let c = ModelConfig { max_len: 6, ..toy() };
    let model = Model::new(&c, 21).unwrap();
    let adapter = random_adapter(&c, 22);
    let seqs = random_sequences(&c, 3, 23);
    let labels = [0usize, 2, 1];
    let batch = Batch::new(&seqs, c.max_len).unwrap();
    let (loss, grads) = model.loss_and_grad(&adapter, &batch, &labels).unwrap();
    assert!((loss - loss_of(&model, &adapter, &batch, &labels)).abs() < 1e-12);

    let eps = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let n_tensors = adapter.tensors().len();
    for ti in 0..n_tensors {
        for _ in 0..4 {
            let len = adapter.tensors()[ti].len();
            let idx = rng.random_range(0..len);
            let mut plus = adapter.clone();
            plus.tensors_mut()[ti].data_mut()[idx] += eps;
            let mut minus = adapter.clone();
            minus.tensors_mut()[ti].data_mut()[idx] -= eps;
            let numeric = (loss_of(&model, &plus, &batch, &labels)
                - loss_of(&model, &minus, &batch, &labels))
                / (2.0 * eps);
            let analytic = grads.tensors()[ti].data()[idx];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5);
            assert!(rel < 1e-4, "tensor {ti} idx {idx}: {analytic} vs {numeric}");
        }
    }
}

fn permute_heads(layer: &LayerParams, adapter: &LayerAdapter, perm: &[usize], dh: usize) -> (LayerParams, LayerAdapter) {
    let mut l = layer.clone();
    let mut a = adapter.clone();
    let d = layer.w_q.rows();
    for proj in Projection::ALL {
        let src_w = layer.projection(proj);
        let src_b = &adapter.get(proj).b;
        for (new_h, &old_h) in perm.iter().enumerate() {
            for i in 0..dh {
                for j in 0..d {
                    l.projection_mut(proj).set(new_h * dh + i, j, src_w.get(old_h * dh + i, j));
                }
                for k in 0..src_b.cols() {
                    a.get_mut(proj).b.set(new_h * dh + i, k, src_b.get(old_h * dh + i, k));
                }
            }
        }
    }
    for (new_h, &old_h) in perm.iter().enumerate() {
        for i in 0..d {
            for c in 0..dh {
                l.w_o.set(i, new_h * dh + c, layer.w_o.get(i, old_h * dh + c));
            }
        }
    }
    (l, a)
}

#[test]
fn mha_is_equivariant_under_head_permutation() {
    let c = toy();
    let bb = Backbone::init(&c, 31).unwrap();
    let adapter = random_adapter(&c, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let x = Tensor::randn(&[7, c.hidden], 1.0, &mut rng);
    let (out, att) = mha_forward(&x, &bb.layers[0], Some(&adapter.layers[0]), c.heads, c.max_len).unwrap();
    let perm = [2usize, 0, 3, 1];
    let (pl, pa) = permute_heads(&bb.layers[0], &adapter.layers[0], &perm, c.head_dim());
    let (pout, patt) = mha_forward(&x, &pl, Some(&pa), c.heads, c.max_len).unwrap();
    for (u, v) in out.data().iter().zip(pout.data()) {
        assert!((u - v).abs() < 1e-12);
    }
    let block = 7 * 7;
    for (new_h, &old_h) in perm.iter().enumerate() {
        assert_eq!(
            &patt.data()[new_h * block..(new_h + 1) * block],
            &att.data()[old_h * block..(old_h + 1) * block]
        );
    }
}

#[test]
fn mha_attention_is_uniform_when_query_and_key_weights_vanish() {
    let c = toy();
    let mut bb = Backbone::init(&c, 41).unwrap();
    bb.layers[0].w_q = Tensor::zeros(&[c.hidden, c.hidden]);
    bb.layers[0].w_k = Tensor::zeros(&[c.hidden, c.hidden]);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = Tensor::randn(&[5, c.hidden], 1.0, &mut rng);
    let (out, att) = mha_forward(&x, &bb.layers[0], None, c.heads, c.max_len).unwrap();
    assert_eq!(att.shape(), &[4, 5, 5]);
    assert!(att.data().iter().all(|p| (p - 0.2).abs() < 1e-15));
    // Uniform attention makes every row the mean value vector.
    let v = x.matmul_t(&bb.layers[0].w_v).unwrap();
    let mean: Vec<f64> = (0..c.hidden).map(|j| (0..5).map(|i| v.get(i, j)).sum::<f64>() / 5.0).collect();
    let mean = Tensor::new(vec![1, c.hidden], mean).unwrap();
    let want = mean.matmul_t(&bb.layers[0].w_o).unwrap();
    for i in 0..5 {
        for j in 0..c.hidden {
            assert!((out.get(i, j) - want.get(0, j)).abs() < 1e-12);
        }
    }
}

#[test]
fn mha_rejects_overlong_input() {
    let c = toy();
    let bb = Backbone::init(&c, 1).unwrap();
    let x = Tensor::zeros(&[17, c.hidden]);
    assert!(mha_forward(&x, &bb.layers[0], None, c.heads, c.max_len).is_err());
}

#[test]
fn gradient_descent_reduces_loss_on_separable_toy_task() {
    let c = toy();
    let model = Model::new(&c, 51).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let mut adapter = LoraAdapter::init(&c, &mut rng);
    let seqs: Vec<Vec<u32>> = (0..24)
        .map(|i| {
            let cls = (i % 3) as u32;
            vec![10 + cls, rng.random_range(20..32), 10 + cls, 1]
        })
        .collect();
    let labels: Vec<usize> = (0..24).map(|i| i % 3).collect();
    let batch = Batch::new(&seqs, c.max_len).unwrap();
    let (first, _) = model.loss_and_grad(&adapter, &batch, &labels).unwrap();
    let mut last = first;
    for _ in 0..40 {
        let (loss, grads) = model.loss_and_grad(&adapter, &batch, &labels).unwrap();
        adapter.axpy(-0.5, &grads).unwrap();
        last = loss;
    }
    assert!(last < 0.5 * first, "{first} -> {last}");
    let eval = model.evaluate(&adapter, &seqs, &labels, 7).unwrap();
    assert_eq!(eval.accuracy, 1.0);
}

#[test]
fn evaluate_chunking_is_consistent() {
    let c = toy();
    let model = Model::new(&c, 61).unwrap();
    let adapter = random_adapter(&c, 62);
    let seqs = random_sequences(&c, 10, 63);
    let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
    let a = model.evaluate(&adapter, &seqs, &labels, 3).unwrap();
    let b = model.evaluate(&adapter, &seqs, &labels, 100).unwrap();
    assert!((a.loss - b.loss).abs() < 1e-12);
    assert_eq!(a.accuracy, b.accuracy);
    assert!(model.evaluate(&adapter, &seqs, &labels[..3], 3).is_err());
}

#[test]
fn argmax_takes_first_maximum() {
    assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
    assert_eq!(argmax(&[2.0]), 0);
}
