//! Encoder-only transformer classifier with LoRA on the attention projections.
//!
//! Block layout (pre-norm):
//!
//! ```text
//! x ← emb[token]·√d + pos
//! repeat L times:
//!     x ← x + MHA(LN₁(x))          Q, K, V carry LoRA; W_O does not
//!     x ← x + W₂·gelu(W₁·LN₂(x))
//! logits ← mean_pool(LN_f(x)) · head
//! ```
//!
//! The backbone is frozen and shared by `Arc` between every simulated
//! client; only a [`LoraAdapter`] is ever mutated.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{LayerAdapter, LoraAdapter, LoraPair, Projection};
use crate::tensor::{GradTape, Tensor, Var};

/// Standard deviation of every Gaussian backbone weight.
pub const BACKBONE_INIT_STD: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub classes: usize,
    pub rank: usize,
    pub eos_token: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            hidden: 32,
            ffn: 64,
            vocab: 32,
            max_len: 16,
            classes: 3,
            rank: 4,
            eos_token: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("hidden", self.hidden),
            ("ffn", self.ffn),
            ("vocab", self.vocab),
            ("max_len", self.max_len),
            ("classes", self.classes),
            ("rank", self.rank),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be at least 1")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "model.hidden ({}) must be divisible by model.heads ({})",
                self.hidden, self.heads
            )));
        }
        if self.eos_token as usize >= self.vocab {
            return Err(Error::config("model.eos_token must be below model.vocab"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `[d × d]`, applied as `W·x`.
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    /// `[d × d_ff]`, applied to row vectors.
    pub ffn_in: Tensor,
    /// `[d_ff × d]`
    pub ffn_out: Tensor,
}

impl LayerParams {
    pub fn projection(&self, proj: Projection) -> &Tensor {
        match proj {
            Projection::Query => &self.w_q,
            Projection::Key => &self.w_k,
            Projection::Value => &self.w_v,
        }
    }

    pub fn projection_mut(&mut self, proj: Projection) -> &mut Tensor {
        match proj {
            Projection::Query => &mut self.w_q,
            Projection::Key => &mut self.w_k,
            Projection::Value => &mut self.w_v,
        }
    }
}

/// Frozen weights Θ. Rebuilt bit-identically from `(config, seed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: ModelConfig,
    pub embedding: Tensor,
    pub positional: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
}

impl Backbone {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden;
        let std = BACKBONE_INIT_STD;
        let embedding = Tensor::randn(&[config.vocab, d], std, &mut rng);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                w_q: Tensor::randn(&[d, d], std, &mut rng),
                w_k: Tensor::randn(&[d, d], std, &mut rng),
                w_v: Tensor::randn(&[d, d], std, &mut rng),
                w_o: Tensor::randn(&[d, d], std, &mut rng),
                ln1_gain: Tensor::filled(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                ln2_gain: Tensor::filled(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                ffn_in: Tensor::randn(&[d, config.ffn], std, &mut rng),
                ffn_out: Tensor::randn(&[config.ffn, d], std, &mut rng),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            embedding,
            positional: sinusoidal_table(config.max_len, d),
            layers,
            final_gain: Tensor::filled(&[d], 1.0),
            final_bias: Tensor::zeros(&[d]),
        })
    }
}

/// `pe[p, 2i] = sin(p / 10000^(2i/d))`, `pe[p, 2i+1] = cos(…)`.
pub fn sinusoidal_table(max_len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[max_len, d]);
    for p in 0..max_len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = p as f64 / 10000f64.powf(exponent);
            t.set(p, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

/// Token sequences padded to a common length with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub seq_len: usize,
    /// `[n · seq_len]`; padded slots hold token 0.
    pub tokens: Vec<u32>,
    pub mask: Vec<bool>,
}

impl Batch {
    /// Pads to the longest sequence in the batch (at most `max_len`).
    pub fn new<S: AsRef<[u32]>>(sequences: &[S], max_len: usize) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::input("empty batch"));
        }
        let seq_len = sequences.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        if seq_len > max_len {
            return Err(Error::input(format!(
                "sequence of length {seq_len} exceeds max_len {max_len}"
            )));
        }
        let mut tokens = Vec::with_capacity(sequences.len() * seq_len);
        let mut mask = Vec::with_capacity(sequences.len() * seq_len);
        for s in sequences {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(Error::input("empty sequence in batch"));
            }
            tokens.extend_from_slice(s);
            mask.extend(std::iter::repeat_n(true, s.len()));
            tokens.extend(std::iter::repeat_n(0, seq_len - s.len()));
            mask.extend(std::iter::repeat_n(false, seq_len - s.len()));
        }
        Ok(Self {
            seq_len,
            tokens,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len() / self.seq_len
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, sample: usize, pos: usize) -> u32 {
        self.tokens[sample * self.seq_len + pos]
    }

    pub fn is_valid(&self, sample: usize, pos: usize) -> bool {
        self.mask[sample * self.seq_len + pos]
    }
}

/// Post-softmax attention of every head in every layer for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub heads: usize,
    pub seq_len: usize,
    pub samples: usize,
    pub tokens: Vec<u32>,
    pub mask: Vec<bool>,
    /// Per layer, `[sample][head][query][key]`.
    pub probs: Vec<Vec<f64>>,
    /// Scaled pre-softmax scores, same layout; masked keys are `-inf`.
    pub scores: Vec<Vec<f64>>,
}

impl AttentionTrace {
    pub fn layers(&self) -> usize {
        self.probs.len()
    }

    fn offset(&self, sample: usize, head: usize, query: usize) -> usize {
        ((sample * self.heads + head) * self.seq_len + query) * self.seq_len
    }

    /// Attention row of `query` in `(layer, sample, head)`, length `seq_len`.
    pub fn row(&self, layer: usize, sample: usize, head: usize, query: usize) -> &[f64] {
        let o = self.offset(sample, head, query);
        &self.probs[layer][o..o + self.seq_len]
    }

    pub fn score_row(&self, layer: usize, sample: usize, head: usize, query: usize) -> &[f64] {
        let o = self.offset(sample, head, query);
        &self.scores[layer][o..o + self.seq_len]
    }

    pub fn token(&self, sample: usize, pos: usize) -> u32 {
        self.tokens[sample * self.seq_len + pos]
    }

    pub fn is_valid(&self, sample: usize, pos: usize) -> bool {
        self.mask[sample * self.seq_len + pos]
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[n × C]`
    pub logits: Tensor,
    pub trace: AttentionTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

struct PairVars {
    a: Var,
    b: Var,
}

struct Graph {
    logits: Var,
    attention: Vec<Var>,
    adapter: Option<(Vec<[PairVars; 3]>, Var)>,
}

/// Handle to the shared frozen backbone.
#[derive(Debug, Clone)]
pub struct Model {
    backbone: Arc<Backbone>,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            backbone: Arc::new(Backbone::init(config, seed)?),
        })
    }

    pub fn from_backbone(backbone: Backbone) -> Self {
        Self {
            backbone: Arc::new(backbone),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.backbone.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    fn check_adapter(&self, adapter: &LoraAdapter) -> Result<()> {
        let c = self.config();
        if adapter.layers.len() != c.layers || adapter.head.shape() != [c.hidden, c.classes] {
            return Err(Error::input("adapter does not match model configuration"));
        }
        for layer in &adapter.layers {
            for proj in Projection::ALL {
                let pair = layer.get(proj);
                if pair.a.shape() != [c.rank, c.hidden] || pair.b.shape() != [c.hidden, c.rank] {
                    return Err(Error::input("adapter does not match model configuration"));
                }
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let c = self.config();
        if batch.seq_len > c.max_len {
            return Err(Error::input(format!(
                "sequence length {} exceeds max_len {}",
                batch.seq_len, c.max_len
            )));
        }
        if let Some(t) = batch.tokens.iter().find(|t| **t as usize >= c.vocab) {
            return Err(Error::input(format!(
                "token id {t} outside vocabulary of {}",
                c.vocab
            )));
        }
        Ok(())
    }

    fn embed(&self, batch: &Batch) -> Tensor {
        let bb = &*self.backbone;
        let d = bb.config.hidden;
        let scale = (d as f64).sqrt();
        let mut x = Tensor::zeros(&[batch.tokens.len(), d]);
        for (r, &tok) in batch.tokens.iter().enumerate() {
            let pos = r % batch.seq_len;
            let emb = bb.embedding.row(tok as usize);
            let pe = bb.positional.row(pos);
            for c in 0..d {
                x.set(r, c, emb[c] * scale + pe[c]);
            }
        }
        x
    }

    fn build(
        &self,
        tape: &mut GradTape,
        batch: &Batch,
        lora: Option<&[LayerAdapter]>,
        head: &Tensor,
        trainable: bool,
    ) -> Result<Graph> {
        self.check_batch(batch)?;
        let bb = &*self.backbone;
        let cfg = &bb.config;
        let mut x = tape.constant(self.embed(batch));
        let mut attention = Vec::with_capacity(cfg.layers);
        let mut adapter_vars = Vec::new();
        for (l, layer) in bb.layers.iter().enumerate() {
            let g1 = tape.constant(layer.ln1_gain.clone());
            let b1 = tape.constant(layer.ln1_bias.clone());
            let h = tape.layer_norm(x, g1, b1)?;
            let pairs = lora.map(|ls| &ls[l]);
            let mut projected = Vec::with_capacity(3);
            let mut pair_vars = Vec::with_capacity(3);
            for proj in Projection::ALL {
                let w = tape.constant(layer.projection(proj).clone());
                let base = tape.matmul_t(h, w)?;
                let out = match pairs {
                    Some(p) => {
                        let pv = leaf_pair(tape, p.get(proj), trainable);
                        let low = tape.matmul_t(h, pv.a)?;
                        let delta = tape.matmul_t(low, pv.b)?;
                        pair_vars.push(pv);
                        tape.add(base, delta)?
                    }
                    None => base,
                };
                projected.push(out);
            }
            if let Ok(vars) = <[PairVars; 3]>::try_from(pair_vars) {
                adapter_vars.push(vars);
            }
            let att = tape.attention(
                projected[0],
                projected[1],
                projected[2],
                cfg.heads,
                batch.seq_len,
                &batch.mask,
            )?;
            attention.push(att);
            let wo = tape.constant(layer.w_o.clone());
            let o = tape.matmul_t(att, wo)?;
            x = tape.add(x, o)?;

            let g2 = tape.constant(layer.ln2_gain.clone());
            let b2 = tape.constant(layer.ln2_bias.clone());
            let h2 = tape.layer_norm(x, g2, b2)?;
            let w1 = tape.constant(layer.ffn_in.clone());
            let w2 = tape.constant(layer.ffn_out.clone());
            let f = tape.matmul(h2, w1)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, w2)?;
            x = tape.add(x, f)?;
        }
        let gf = tape.constant(bb.final_gain.clone());
        let bf = tape.constant(bb.final_bias.clone());
        let x = tape.layer_norm(x, gf, bf)?;
        let pooled = tape.mean_pool(x, batch.seq_len, &batch.mask)?;
        let head_var = if trainable {
            tape.param(head.clone())
        } else {
            tape.constant(head.clone())
        };
        let logits = tape.matmul(pooled, head_var)?;
        Ok(Graph {
            logits,
            attention,
            adapter: lora.map(|_| (adapter_vars, head_var)),
        })
    }

    fn trace(&self, tape: &GradTape, graph: &Graph, batch: &Batch) -> AttentionTrace {
        let mut probs = Vec::with_capacity(graph.attention.len());
        let mut scores = Vec::with_capacity(graph.attention.len());
        for &att in &graph.attention {
            let view = tape.attention_view(att).expect("attention node");
            probs.push(view.probs.to_vec());
            scores.push(view.scores.to_vec());
        }
        AttentionTrace {
            heads: self.config().heads,
            seq_len: batch.seq_len,
            samples: batch.len(),
            tokens: batch.tokens.clone(),
            mask: batch.mask.clone(),
            probs,
            scores,
        }
    }

    /// Logits and attention trace with the adapter applied.
    pub fn forward(&self, adapter: &LoraAdapter, batch: &Batch) -> Result<ForwardOutput> {
        self.check_adapter(adapter)?;
        let mut tape = GradTape::new();
        let graph = self.build(&mut tape, batch, Some(&adapter.layers), &adapter.head, false)?;
        let logits = tape.value(graph.logits).clone();
        if !logits.is_finite() {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(ForwardOutput {
            trace: self.trace(&tape, &graph, batch),
            logits,
        })
    }

    /// Logits with the LoRA branches removed entirely; only the task head is used.
    pub fn forward_backbone_only(&self, head: &Tensor, batch: &Batch) -> Result<ForwardOutput> {
        let mut tape = GradTape::new();
        let graph = self.build(&mut tape, batch, None, head, false)?;
        Ok(ForwardOutput {
            logits: tape.value(graph.logits).clone(),
            trace: self.trace(&tape, &graph, batch),
        })
    }

    /// Mean cross-entropy and its gradient with respect to `{A, B, head}` only.
    pub fn loss_and_grad(
        &self,
        adapter: &LoraAdapter,
        batch: &Batch,
        labels: &[usize],
    ) -> Result<(f64, LoraAdapter)> {
        self.check_adapter(adapter)?;
        let mut tape = GradTape::new();
        let graph = self.build(&mut tape, batch, Some(&adapter.layers), &adapter.head, true)?;
        let loss = tape.cross_entropy(graph.logits, labels)?;
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let mut grads = tape.backward(loss);
        let (pair_vars, head_var) = graph.adapter.expect("adapter attached");
        let mut take = |v: Var, like: &Tensor| {
            grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(like.shape()))
        };
        let layers = pair_vars
            .iter()
            .zip(&adapter.layers)
            .map(|(vars, layer)| {
                let mut grad_pair = |i: usize, pair: &LoraPair| LoraPair {
                    a: take(vars[i].a, &pair.a),
                    b: take(vars[i].b, &pair.b),
                };
                LayerAdapter {
                    query: grad_pair(0, &layer.query),
                    key: grad_pair(1, &layer.key),
                    value: grad_pair(2, &layer.value),
                }
            })
            .collect();
        let head = take(head_var, &adapter.head);
        Ok((loss_value, LoraAdapter { layers, head }))
    }

    /// Mean loss and accuracy over labelled sequences, in chunks of `batch_size`.
    pub fn evaluate<S: AsRef<[u32]>>(
        &self,
        adapter: &LoraAdapter,
        sequences: &[S],
        labels: &[usize],
        batch_size: usize,
    ) -> Result<Evaluation> {
        if sequences.is_empty() || sequences.len() != labels.len() {
            return Err(Error::input("evaluation needs matching, non-empty sequences and labels"));
        }
        let mut total_loss = 0.0;
        let mut correct = 0usize;
        for (seqs, labs) in sequences.chunks(batch_size.max(1)).zip(labels.chunks(batch_size.max(1))) {
            let batch = Batch::new(seqs, self.config().max_len)?;
            let out = self.forward(adapter, &batch)?;
            total_loss += out.logits.cross_entropy(labs)? * labs.len() as f64;
            for (i, &label) in labs.iter().enumerate() {
                if argmax(out.logits.row(i)) == label {
                    correct += 1;
                }
            }
        }
        let n = labels.len() as f64;
        Ok(Evaluation {
            loss: total_loss / n,
            accuracy: correct as f64 / n,
        })
    }
}

fn leaf_pair(tape: &mut GradTape, pair: &LoraPair, trainable: bool) -> PairVars {
    if trainable {
        PairVars {
            a: tape.param(pair.a.clone()),
            b: tape.param(pair.b.clone()),
        }
    } else {
        PairVars {
            a: tape.constant(pair.a.clone()),
            b: tape.constant(pair.b.clone()),
        }
    }
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// One multi-head attention block on a single sequence `x` (`[T × d]`):
/// `Concat(head₁ … head_H)·W_O` with each head attending over all `T`
/// positions. Returns the output and the post-softmax attention `[H × T × T]`.
pub fn mha_forward(
    x: &Tensor,
    layer: &LayerParams,
    lora: Option<&LayerAdapter>,
    heads: usize,
    max_len: usize,
) -> Result<(Tensor, Tensor)> {
    let t = x.rows();
    if t > max_len {
        return Err(Error::input(format!("sequence length {t} exceeds max_len {max_len}")));
    }
    let mut tape = GradTape::new();
    let xv = tape.constant(x.clone());
    let mut projected = Vec::with_capacity(3);
    for proj in Projection::ALL {
        let w = tape.constant(layer.projection(proj).clone());
        let base = tape.matmul_t(xv, w)?;
        let out = match lora {
            Some(l) => {
                let pv = leaf_pair(&mut tape, l.get(proj), false);
                let low = tape.matmul_t(xv, pv.a)?;
                let delta = tape.matmul_t(low, pv.b)?;
                tape.add(base, delta)?
            }
            None => base,
        };
        projected.push(out);
    }
    let mask = vec![true; t];
    let att = tape.attention(projected[0], projected[1], projected[2], heads, t, &mask)?;
    let wo = tape.constant(layer.w_o.clone());
    let out = tape.matmul_t(att, wo)?;
    let probs = tape.attention_view(att).expect("attention node").probs.to_vec();
    Ok((tape.value(out).clone(), Tensor::new(vec![heads, t, t], probs)?))
}

#[cfg(test)]
mod tests;
