//! Reverse-mode gradient tape.
//!
//! Every operation appends one node holding its forward value and whatever
//! it needs to replay its vector-Jacobian product. [`GradTape::backward`]
//! walks the nodes once, newest first, and accumulates into input slots in
//! tape order, so gradient sums are bit-reproducible for a given program.

use crate::error::{Error, Result};

use super::{dot, moments, Tensor};

/// Handle to a node on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    Attention(Box<AttentionCache>),
    MeanPool {
        x: Var,
        seq_len: usize,
        mask: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    seq_len: usize,
    key_mask: Vec<bool>,
    /// `[sample][head][query][key]`, zero at masked keys.
    probs: Vec<f64>,
    /// Scaled pre-softmax scores, same layout; masked keys hold `-inf`.
    scores: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Per-head attention probabilities captured by one attention node.
#[derive(Debug, Clone, Copy)]
pub struct AttentionView<'a> {
    pub heads: usize,
    pub seq_len: usize,
    pub probs: &'a [f64],
    pub scores: &'a [f64],
}

#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// A trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, rg, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_row_bias(self.value(bias))?;
        let rg = self.needs(&[x, bias]);
        Ok(self.push(value, rg, Op::AddRowBias(x, bias)))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(value, rg, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let (g, b) = (self.value(gain), self.value(bias));
        if g.len() != d || b.len() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let mut normalized = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let (mean, inv) = moments(row);
            inv_std.push(inv);
            for (i, v) in row.iter().enumerate() {
                let n = (v - mean) * inv;
                normalized.push(n);
                out.push(n * g.data()[i] + b.data()[i]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).softmax_rows();
        let rg = self.needs(&[x]);
        self.push(value, rg, Op::SoftmaxRows(x))
    }

    /// Multi-head scaled dot-product attention over a stack of sequences.
    ///
    /// `q`, `k`, `v` are `[n·seq_len × d]`; head `h` owns columns
    /// `[h·d/H, (h+1)·d/H)`. Keys whose `key_mask` entry is false get zero
    /// probability. Every sequence needs at least one unmasked key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        key_mask: &[bool],
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.shape().len() != 2 {
            return Err(Error::Shape {
                op: "attention",
                left: qv.shape().to_vec(),
                right: kv.shape().to_vec(),
            });
        }
        let (rows, d) = (qv.rows(), qv.cols());
        if heads == 0 || d % heads != 0 {
            return Err(Error::input(format!("{d} columns not divisible by {heads} heads")));
        }
        if seq_len == 0 || rows % seq_len != 0 || key_mask.len() != rows {
            return Err(Error::input("attention mask / sequence length mismatch"));
        }
        let n = rows / seq_len;
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let t = seq_len;
        let mut probs = vec![0.0; n * heads * t * t];
        let mut scores = vec![f64::NEG_INFINITY; n * heads * t * t];
        let mut out = vec![0.0; rows * d];
        for s in 0..n {
            let valid = &key_mask[s * t..(s + 1) * t];
            if !valid.iter().any(|&m| m) {
                return Err(Error::input(format!("sequence {s} has no unmasked tokens")));
            }
            for h in 0..heads {
                let cols = h * dk..(h + 1) * dk;
                for i in 0..t {
                    let base = ((s * heads + h) * t + i) * t;
                    let qi = &qv.row(s * t + i)[cols.clone()];
                    let row_scores = &mut scores[base..base + t];
                    for j in 0..t {
                        if valid[j] {
                            row_scores[j] = dot(qi, &kv.row(s * t + j)[cols.clone()]) * scale;
                        }
                    }
                    let row_probs = &mut probs[base..base + t];
                    masked_softmax(row_scores, valid, row_probs);
                    let o = &mut out[(s * t + i) * d + h * dk..(s * t + i) * d + (h + 1) * dk];
                    for j in 0..t {
                        let p = row_probs[j];
                        if p == 0.0 {
                            continue;
                        }
                        for (ov, vj) in o.iter_mut().zip(&vv.row(s * t + j)[cols.clone()]) {
                            *ov += p * vj;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let rg = self.needs(&[q, k, v]);
        Ok(self.push(
            value,
            rg,
            Op::Attention(Box::new(AttentionCache {
                q,
                k,
                v,
                heads,
                seq_len,
                key_mask: key_mask.to_vec(),
                probs,
                scores,
            })),
        ))
    }

    /// Attention probabilities recorded by an [`attention`](Self::attention) node.
    pub fn attention_view(&self, var: Var) -> Option<AttentionView<'_>> {
        match &self.nodes[var.0].op {
            Op::Attention(cache) => Some(AttentionView {
                heads: cache.heads,
                seq_len: cache.seq_len,
                probs: &cache.probs,
                scores: &cache.scores,
            }),
            _ => None,
        }
    }

    /// Mean over the unmasked rows of each length-`seq_len` block.
    pub fn mean_pool(&mut self, x: Var, seq_len: usize, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        if seq_len == 0 || rows % seq_len != 0 || mask.len() != rows {
            return Err(Error::input("mean_pool mask / sequence length mismatch"));
        }
        let n = rows / seq_len;
        let mut out = vec![0.0; n * d];
        for s in 0..n {
            let count = mask[s * seq_len..(s + 1) * seq_len].iter().filter(|m| **m).count();
            if count == 0 {
                return Err(Error::input(format!("sequence {s} has no unmasked tokens")));
            }
            let o = &mut out[s * d..(s + 1) * d];
            for i in 0..seq_len {
                if mask[s * seq_len + i] {
                    for (ov, xv) in o.iter_mut().zip(xv.row(s * seq_len + i)) {
                        *ov += xv;
                    }
                }
            }
            for ov in o.iter_mut() {
                *ov /= count as f64;
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(
            value,
            rg,
            Op::MeanPool {
                x,
                seq_len,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Mean cross-entropy of `labels` under the row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let loss = lv.cross_entropy(labels)?;
        let probs = lv.softmax_rows().into_data();
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.needs(&[x]);
        self.push(value, rg, Op::Sum(x))
    }

    /// Reverse pass from a scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let out_shape = self.nodes[output.0].value.shape().to_vec();
        grads[output.0] = Some(Tensor::filled(&out_shape, 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.axpy(1.0, &g).expect("gradient shape matches value"),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, up: &Tensor, grads: &mut [Option<Tensor>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                // C = A·B: dA = dC·Bᵀ, dB = Aᵀ·dC
                if rg(*a) {
                    let g = up.matmul_t(self.value(*b)).expect("shapes checked on forward");
                    self.accumulate(grads, *a, g);
                }
                if rg(*b) {
                    let g = self.value(*a).t_matmul(up).expect("shapes checked on forward");
                    self.accumulate(grads, *b, g);
                }
            }
            Op::MatMulT(a, b) => {
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                if rg(*a) {
                    let g = up.matmul(self.value(*b)).expect("shapes checked on forward");
                    self.accumulate(grads, *a, g);
                }
                if rg(*b) {
                    let g = up.t_matmul(self.value(*a)).expect("shapes checked on forward");
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, up.clone());
                self.accumulate(grads, *b, up.clone());
            }
            Op::AddRowBias(x, bias) => {
                self.accumulate(grads, *x, up.clone());
                if rg(*bias) {
                    let c = up.cols();
                    let mut g = vec![0.0; c];
                    for row in up.data().chunks(c) {
                        for (gv, u) in g.iter_mut().zip(row) {
                            *gv += u;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, g).expect("bias shape"));
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(up.data())
                    .map(|(&v, &u)| u * gelu_grad(v))
                    .collect();
                let g = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
                self.accumulate(grads, *x, g);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = up.cols();
                let gv = self.value(*gain).data();
                if rg(*gain) || rg(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (urow, nrow) in up.data().chunks(d).zip(normalized.chunks(d)) {
                        for i in 0..d {
                            dg[i] += urow[i] * nrow[i];
                            db[i] += urow[i];
                        }
                    }
                    let gshape = self.value(*gain).shape().to_vec();
                    let bshape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *gain, Tensor::new(gshape, dg).expect("gain shape"));
                    self.accumulate(grads, *bias, Tensor::new(bshape, db).expect("bias shape"));
                }
                if rg(*x) {
                    let mut dx = Vec::with_capacity(up.len());
                    let df = d as f64;
                    for ((urow, nrow), inv) in up
                        .data()
                        .chunks(d)
                        .zip(normalized.chunks(d))
                        .zip(inv_std)
                    {
                        let dn: Vec<f64> = urow.iter().zip(gv).map(|(u, g)| u * g).collect();
                        let sum_dn: f64 = dn.iter().sum();
                        let sum_dn_n: f64 = dn.iter().zip(nrow).map(|(a, b)| a * b).sum();
                        for i in 0..d {
                            dx.push(inv / df * (df * dn[i] - sum_dn - nrow[i] * sum_dn_n));
                        }
                    }
                    let g = Tensor::new(up.shape().to_vec(), dx).expect("same shape");
                    self.accumulate(grads, *x, g);
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (yrow, urow) in y.data().chunks(c).zip(up.data().chunks(c)) {
                    let inner = dot(yrow, urow);
                    dx.extend(yrow.iter().zip(urow).map(|(yv, u)| yv * (u - inner)));
                }
                let g = Tensor::new(y.shape().to_vec(), dx).expect("same shape");
                self.accumulate(grads, *x, g);
            }
            Op::Attention(cache) => self.attention_backward(cache, up, grads),
            Op::MeanPool { x, seq_len, mask } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for s in 0..xv.rows() / seq_len {
                    let block = &mask[s * seq_len..(s + 1) * seq_len];
                    let count = block.iter().filter(|m| **m).count() as f64;
                    for (i, &keep) in block.iter().enumerate() {
                        if keep {
                            let r = s * seq_len + i;
                            for c in 0..d {
                                dx[r * d + c] = up.data()[s * d + c] / count;
                            }
                        }
                    }
                }
                let g = Tensor::new(xv.shape().to_vec(), dx).expect("same shape");
                self.accumulate(grads, *x, g);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let lv = self.value(*logits);
                let (n, c) = (lv.rows(), lv.cols());
                let scale = up.data()[0] / n as f64;
                let mut g = probs.clone();
                for (i, &label) in labels.iter().enumerate() {
                    g[i * c + label] -= 1.0;
                }
                for v in g.iter_mut() {
                    *v *= scale;
                }
                let g = Tensor::new(lv.shape().to_vec(), g).expect("same shape");
                self.accumulate(grads, *logits, g);
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::filled(&shape, up.data()[0]));
            }
        }
    }

    fn attention_backward(&self, c: &AttentionCache, up: &Tensor, grads: &mut [Option<Tensor>]) {
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let (rows, d) = (qv.rows(), qv.cols());
        let t = c.seq_len;
        let heads = c.heads;
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut dq = vec![0.0; rows * d];
        let mut dkm = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dp = vec![0.0; t];
        for s in 0..rows / t {
            for h in 0..heads {
                let cols = h * dk..(h + 1) * dk;
                for i in 0..t {
                    let base = ((s * heads + h) * t + i) * t;
                    let p = &c.probs[base..base + t];
                    let dout = &up.row(s * t + i)[cols.clone()];
                    // dP_ij = dO_i · V_j; dV_j += P_ij · dO_i
                    for j in 0..t {
                        if !c.key_mask[s * t + j] {
                            dp[j] = 0.0;
                            continue;
                        }
                        dp[j] = dot(dout, &vv.row(s * t + j)[cols.clone()]);
                        let dvj = &mut dv[(s * t + j) * d + h * dk..(s * t + j) * d + (h + 1) * dk];
                        for (g, o) in dvj.iter_mut().zip(dout) {
                            *g += p[j] * o;
                        }
                    }
                    // dS = P ⊙ (dP − Σ P·dP)
                    let inner = dot(p, &dp);
                    let qi = &qv.row(s * t + i)[cols.clone()];
                    for j in 0..t {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - inner) * scale;
                        let kj = &kv.row(s * t + j)[cols.clone()];
                        let dqi = &mut dq[(s * t + i) * d + h * dk..(s * t + i) * d + (h + 1) * dk];
                        for (g, kval) in dqi.iter_mut().zip(kj) {
                            *g += ds * kval;
                        }
                        let dkj =
                            &mut dkm[(s * t + j) * d + h * dk..(s * t + j) * d + (h + 1) * dk];
                        for (g, qval) in dkj.iter_mut().zip(qi) {
                            *g += ds * qval;
                        }
                    }
                }
            }
        }
        let shape = vec![rows, d];
        self.accumulate(grads, c.q, Tensor::new(shape.clone(), dq).expect("shape"));
        self.accumulate(grads, c.k, Tensor::new(shape.clone(), dkm).expect("shape"));
        self.accumulate(grads, c.v, Tensor::new(shape, dv).expect("shape"));
    }
}

fn masked_softmax(scores: &[f64], valid: &[bool], out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (s, &m) in scores.iter().zip(valid) {
        if m && *s > max {
            max = *s;
        }
    }
    let mut total = 0.0;
    for ((o, s), &m) in out.iter_mut().zip(scores).zip(valid) {
        *o = if m { (s - max).exp() } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
