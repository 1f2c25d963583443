//! Training OPs and upload size per client per round.
//!
//! Two counting conventions are provided:
//!
//! * `StandardMac`: one multiply-accumulate per weight per token, so a
//!   `d×d` projection over `T` tokens costs `T·d²`.
//! * `AsPrinted`: the layerwise table formulas taken literally, including
//!   the `T·d³` projection terms. These overshoot the standard count by
//!   roughly a factor of `d`, and are kept so the gap can be reported.
//!
//! Head pruning is applied per head, not per fraction: a sparsity maps to
//! `⌊s·L·H⌋` pruned heads exactly as the simulator does, and head-owned
//! terms scale by `kept / (L·H)`.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::pruned_count;
use crate::lora::wire::UpdateLayout;
use crate::model::ModelConfig;

pub const MIB: f64 = 1024.0 * 1024.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub seq_len: usize,
    pub rank: usize,
    pub prompt_len: usize,
    pub ffn: usize,
    /// Task-head outputs; 0 leaves the head out of every count.
    pub classes: usize,
    pub bytes_per_param: usize,
}

/// `(name, L, H, d)` of the built-in presets.
pub const PRESETS: [(&str, usize, usize, usize); 6] = [
    ("t5-small", 18, 8, 512),
    ("t5-base", 36, 12, 768),
    ("bart", 36, 16, 1024),
    ("distilbert", 12, 12, 768),
    ("roberta", 12, 12, 512),
    ("gpt2-small", 12, 12, 768),
];

impl ArchSpec {
    /// Preset with `T = 512`, `r = 16`, `T_p = 20`, `d_ff = d`, no task head.
    pub fn preset(name: &str) -> Result<Self> {
        let key = name.to_ascii_lowercase();
        let (n, layers, heads, hidden) = PRESETS
            .iter()
            .find(|p| p.0 == key)
            .copied()
            .ok_or_else(|| {
                let names: Vec<&str> = PRESETS.iter().map(|p| p.0).collect();
                Error::input(format!("unknown preset '{name}'; available: {}", names.join(", ")))
            })?;
        Ok(Self {
            name: n.to_string(),
            layers,
            heads,
            hidden,
            seq_len: 512,
            rank: 16,
            prompt_len: 20,
            ffn: hidden,
            classes: 0,
            bytes_per_param: 4,
        })
    }

    /// The simulator's own model, one sequence of `max_len` tokens.
    pub fn from_model(config: &ModelConfig) -> Self {
        Self {
            name: "toy".into(),
            layers: config.layers,
            heads: config.heads,
            hidden: config.hidden,
            seq_len: config.max_len,
            rank: config.rank,
            prompt_len: 0,
            ffn: config.ffn,
            classes: config.classes,
            bytes_per_param: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.layers,
            self.heads,
            self.hidden,
            self.seq_len,
            self.rank,
            self.ffn,
            self.bytes_per_param,
        ];
        if dims.contains(&0) {
            return Err(Error::input(format!("architecture '{}' has a zero dimension", self.name)));
        }
        Ok(())
    }

    pub fn total_heads(&self) -> usize {
        self.layers * self.heads
    }

    /// Hidden rows owned by `kept` heads, `⌊kept·d/H⌋`. Exact when `H`
    /// divides `d`; some presets (RoBERTa here) have `d mod H ≠ 0`.
    pub fn head_rows(&self, kept: usize) -> u64 {
        (kept * self.hidden / self.heads) as u64
    }

    pub fn kept_heads(&self, sparsity: f64) -> Result<usize> {
        Ok(self.total_heads() - pruned_count(self.layers, self.heads, sparsity)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeftMethod {
    Fft,
    Lora,
    Ia3,
    PromptTuning,
    PTuning,
}

impl PeftMethod {
    pub const ALL: [PeftMethod; 5] = [
        PeftMethod::Fft,
        PeftMethod::Lora,
        PeftMethod::Ia3,
        PeftMethod::PromptTuning,
        PeftMethod::PTuning,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PeftMethod::Fft => "fft",
            PeftMethod::Lora => "lora",
            PeftMethod::Ia3 => "ia3",
            PeftMethod::PromptTuning => "prompt-tuning",
            PeftMethod::PTuning => "p-tuning",
        }
    }
}

impl fmt::Display for PeftMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PeftMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        PeftMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == key)
            .ok_or_else(|| Error::input(format!("unknown method '{s}'; expected fft, lora, ia3, prompt-tuning or p-tuning")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpsConvention {
    AsPrinted,
    #[default]
    StandardMac,
}

impl OpsConvention {
    pub fn as_str(self) -> &'static str {
        match self {
            OpsConvention::AsPrinted => "as-printed",
            OpsConvention::StandardMac => "standard-mac",
        }
    }
}

/// Which work a pruned head saves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneAccounting {
    /// Only the LoRA `B` backward terms of pruned heads are skipped.
    LoraBackward,
    /// Pruned heads skip their Q/K/V projection, attention and LoRA `B`
    /// work in both directions.
    #[default]
    HeadSkip,
}

impl PruneAccounting {
    pub fn as_str(self) -> &'static str {
        match self {
            PruneAccounting::LoraBackward => "lora-backward",
            PruneAccounting::HeadSkip => "head-skip",
        }
    }
}

impl FromStr for PruneAccounting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora-backward" => Ok(PruneAccounting::LoraBackward),
            "head-skip" => Ok(PruneAccounting::HeadSkip),
            _ => Err(Error::input(format!("unknown prune accounting '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: &'static str,
    pub forward: f64,
    pub backward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub arch: ArchSpec,
    pub method: PeftMethod,
    pub sparsity: f64,
    pub kept_heads: usize,
    pub convention: OpsConvention,
    pub accounting: PruneAccounting,
    pub rows: Vec<CostRow>,
    pub forward: f64,
    pub backward: f64,
    pub total: f64,
    pub trainable_params: u64,
    pub comm_bytes: u64,
}

struct Scales {
    /// Fraction of heads kept, `kept / (L·H)`.
    kept: f64,
    accounting: PruneAccounting,
}

impl Scales {
    /// Scale for Q/K/V and attention rows.
    fn heads(&self) -> f64 {
        match self.accounting {
            PruneAccounting::HeadSkip => self.kept,
            PruneAccounting::LoraBackward => 1.0,
        }
    }

    /// Scale for head-owned adapter terms, forward and backward.
    fn owned(&self) -> (f64, f64) {
        match self.accounting {
            PruneAccounting::HeadSkip => (self.kept, self.kept),
            PruneAccounting::LoraBackward => (1.0, self.kept),
        }
    }
}

fn row(name: &'static str, forward: f64, backward: f64) -> CostRow {
    CostRow { name, forward, backward }
}

fn standard_rows(a: &ArchSpec, method: PeftMethod, s: &Scales) -> Vec<CostRow> {
    let l = a.layers as f64;
    let d = a.hidden as f64;
    let r = a.rank as f64;
    let ff = a.ffn as f64;
    let t = match method {
        PeftMethod::PromptTuning | PeftMethod::PTuning => (a.seq_len + a.prompt_len) as f64,
        _ => a.seq_len as f64,
    };
    let tp = a.prompt_len as f64;
    // Weight gradients are only formed when the backbone itself trains.
    let dw = if method == PeftMethod::Fft { 2.0 } else { 1.0 };
    let h = s.heads();
    let mut rows = vec![
        row("qkv", l * 3.0 * t * d * d * h, l * dw * 3.0 * t * d * d * h),
        row("attention", l * 2.0 * t * t * d * h, l * 4.0 * t * t * d * h),
        row("fc", l * t * d * ff, l * dw * t * d * ff),
    ];
    let (of, ob) = s.owned();
    match method {
        PeftMethod::Fft => {}
        PeftMethod::Lora => {
            // Per projection: Z = A·X and dA, dX from dZ; Y = B·Z, dZ and dB.
            rows.push(row("lora_a", l * 3.0 * t * d * r, l * 3.0 * 2.0 * t * d * r));
            rows.push(row("lora_b", l * 3.0 * t * d * r * of, l * 3.0 * 2.0 * t * d * r * ob));
        }
        PeftMethod::Ia3 => {
            // Rescaled keys and values are head-owned; the FFN vector is not.
            rows.push(row("ia3_kv", l * 2.0 * t * d * of, l * 2.0 * 2.0 * t * d * ob));
            rows.push(row("ia3_ff", l * t * ff, l * 2.0 * t * ff));
        }
        PeftMethod::PromptTuning => rows.push(row("prompt", tp * d * d, tp * d * d)),
        PeftMethod::PTuning => rows.push(row("prompt", l * tp * d * d, l * tp * d * d)),
    }
    rows
}

fn printed_rows(a: &ArchSpec, method: PeftMethod, s: &Scales) -> Vec<CostRow> {
    let l = a.layers as f64;
    let d = a.hidden as f64;
    let r = a.rank as f64;
    let t = a.seq_len as f64;
    let h = s.heads();
    let mut rows = vec![
        row("qkv", l * t * d.powi(3) * h, l * (t * d.powi(3) + t * d * d) * h),
        row(
            "attention",
            l * (t * t * d * d + t.powi(3) * d) * h,
            l * (t * t * d * d + 3.0 * t.powi(3) * d) * h,
        ),
        row("fc", l * t * d.powi(3), l * (t * d.powi(3) + t * d * d)),
    ];
    let (of, ob) = s.owned();
    let tp = a.prompt_len as f64;
    let tt = t + tp;
    let prompt_fwd = tp * d.powi(3) + tt * tt * d * d + tt.powi(3) * d;
    let prompt_bwd = tp * d.powi(3) + tt * tt * d * d + 3.0 * tt.powi(3) * d;
    match method {
        PeftMethod::Fft => {}
        PeftMethod::Lora => rows.push(row(
            "lora",
            l * (t * d * d * r + t * r * r * d) * of,
            l * (t * d * d * r + t * r * d + t * d * r + t * r * r * d + t * d.powi(3)) * ob,
        )),
        PeftMethod::Ia3 => rows.push(row("ia3", l * t * d * of, l * 2.0 * t * d * ob)),
        PeftMethod::PromptTuning => rows.push(row("prompt", prompt_fwd, prompt_bwd)),
        PeftMethod::PTuning => rows.push(row("prompt", l * prompt_fwd, l * prompt_bwd)),
    }
    rows
}

/// Trainable parameters a client uploads with `kept` of `L·H` heads active.
pub fn trainable_params(a: &ArchSpec, method: PeftMethod, kept: usize) -> u64 {
    let (l, d, r, ff) = (a.layers as u64, a.hidden as u64, a.rank as u64, a.ffn as u64);
    let rows = a.head_rows(kept);
    let head = d * a.classes as u64;
    head + match method {
        // Q, K, V rows per kept head plus the FFN.
        PeftMethod::Fft => 3 * rows * d + l * d * ff,
        PeftMethod::Lora => 3 * (l * r * d + rows * r),
        PeftMethod::Ia3 => 2 * rows + l * ff,
        PeftMethod::PromptTuning => a.prompt_len as u64 * d,
        PeftMethod::PTuning => l * a.prompt_len as u64 * d,
    }
}

/// Upload size in bytes: trainable parameters times bytes per parameter.
pub fn comm_for(a: &ArchSpec, method: PeftMethod, sparsity: f64) -> Result<u64> {
    a.validate()?;
    let kept = a.kept_heads(sparsity)?;
    Ok(trainable_params(a, method, kept) * a.bytes_per_param as u64)
}

/// Exact encoded size of a LoRA client update, framing included.
pub fn payload_bytes(a: &ArchSpec, kept_heads: usize) -> u64 {
    UpdateLayout {
        layers: a.layers,
        heads: a.heads,
        hidden: a.hidden,
        rank: a.rank,
        classes: a.classes,
    }
    .payload_len(kept_heads) as u64
}

pub fn ops_for(
    a: &ArchSpec,
    method: PeftMethod,
    sparsity: f64,
    convention: OpsConvention,
    accounting: PruneAccounting,
) -> Result<CostReport> {
    a.validate()?;
    let kept = a.kept_heads(sparsity)?;
    ops_for_kept(a, method, kept, sparsity, convention, accounting)
}

/// As [`ops_for`], with the number of surviving heads given directly.
pub fn ops_for_kept(
    a: &ArchSpec,
    method: PeftMethod,
    kept: usize,
    sparsity: f64,
    convention: OpsConvention,
    accounting: PruneAccounting,
) -> Result<CostReport> {
    a.validate()?;
    if kept == 0 || kept > a.total_heads() {
        return Err(Error::input(format!("{kept} kept heads out of {}", a.total_heads())));
    }
    let scales = Scales {
        kept: kept as f64 / a.total_heads() as f64,
        accounting,
    };
    let rows = match convention {
        OpsConvention::StandardMac => standard_rows(a, method, &scales),
        OpsConvention::AsPrinted => printed_rows(a, method, &scales),
    };
    let forward: f64 = rows.iter().map(|r| r.forward).sum();
    let backward: f64 = rows.iter().map(|r| r.backward).sum();
    let trainable = trainable_params(a, method, kept);
    Ok(CostReport {
        arch: a.clone(),
        method,
        sparsity,
        kept_heads: kept,
        convention,
        accounting,
        rows,
        forward,
        backward,
        total: forward + backward,
        trainable_params: trainable,
        comm_bytes: trainable * a.bytes_per_param as u64,
    })
}

/// One line of the cost table: both conventions side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTableRow {
    pub arch: String,
    pub method: PeftMethod,
    pub sparsity: f64,
    pub accounting: PruneAccounting,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub seq_len: usize,
    pub rank: usize,
    pub prompt_len: usize,
    pub ffn: usize,
    pub classes: usize,
    pub bytes_per_param: usize,
    pub kept_heads: usize,
    pub trainable_params: u64,
    pub comm_bytes: u64,
    pub comm_mib: f64,
    pub mac_forward: f64,
    pub mac_backward: f64,
    pub mac_total: f64,
    pub printed_forward: f64,
    pub printed_backward: f64,
    pub printed_total: f64,
    /// `printed_total / mac_total`.
    pub printed_over_mac: f64,
}

impl CostTableRow {
    pub fn compute(a: &ArchSpec, method: PeftMethod, sparsity: f64, accounting: PruneAccounting) -> Result<Self> {
        let mac = ops_for(a, method, sparsity, OpsConvention::StandardMac, accounting)?;
        let printed = ops_for(a, method, sparsity, OpsConvention::AsPrinted, accounting)?;
        Ok(Self {
            arch: a.name.clone(),
            method,
            sparsity,
            accounting,
            layers: a.layers,
            heads: a.heads,
            hidden: a.hidden,
            seq_len: a.seq_len,
            rank: a.rank,
            prompt_len: a.prompt_len,
            ffn: a.ffn,
            classes: a.classes,
            bytes_per_param: a.bytes_per_param,
            kept_heads: mac.kept_heads,
            trainable_params: mac.trainable_params,
            comm_bytes: mac.comm_bytes,
            comm_mib: mac.comm_bytes as f64 / MIB,
            mac_forward: mac.forward,
            mac_backward: mac.backward,
            mac_total: mac.total,
            printed_forward: printed.forward,
            printed_backward: printed.backward,
            printed_total: printed.total,
            printed_over_mac: printed.total / mac.total,
        })
    }

    pub fn arch_spec(&self) -> ArchSpec {
        ArchSpec {
            name: self.arch.clone(),
            layers: self.layers,
            heads: self.heads,
            hidden: self.hidden,
            seq_len: self.seq_len,
            rank: self.rank,
            prompt_len: self.prompt_len,
            ffn: self.ffn,
            classes: self.classes,
            bytes_per_param: self.bytes_per_param,
        }
    }

    /// Recomputes the row from its own inputs.
    pub fn recompute(&self) -> Result<Self> {
        Self::compute(&self.arch_spec(), self.method, self.sparsity, self.accounting)
    }
}

pub fn cost_table(
    archs: &[ArchSpec],
    methods: &[PeftMethod],
    sparsities: &[f64],
    accounting: PruneAccounting,
) -> Result<Vec<CostTableRow>> {
    let mut out = Vec::with_capacity(archs.len() * methods.len() * sparsities.len());
    for a in archs {
        for &m in methods {
            for &s in sparsities {
                out.push(CostTableRow::compute(a, m, s, accounting)?);
            }
        }
    }
    Ok(out)
}

pub fn write_csv<W: Write>(rows: &[CostTableRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<CostTableRow>> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

/// `1234567890.0` → `"1.23G"`.
pub fn human_ops(v: f64) -> String {
    const UNITS: [(f64, &str); 5] = [(1e15, "P"), (1e12, "T"), (1e9, "G"), (1e6, "M"), (1e3, "K")];
    for (scale, unit) in UNITS {
        if v >= scale {
            return format!("{:.2}{unit}", v / scale);
        }
    }
    format!("{v:.0}")
}

/// Fixed-width text rendering of a cost table.
pub fn render_text(rows: &[CostTableRow]) -> String {
    let mut s = format!(
        "{:<12} {:<14} {:>8} {:>6} {:>12} {:>10} {:>10} {:>10} {:>12}\n",
        "arch", "method", "sparsity", "kept", "params", "comm_MiB", "MAC_ops", "printed", "printed/MAC"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<12} {:<14} {:>8.3} {:>6} {:>12} {:>10.3} {:>10} {:>10} {:>12.1}\n",
            r.arch,
            r.method.as_str(),
            r.sparsity,
            r.kept_heads,
            r.trainable_params,
            r.comm_mib,
            human_ops(r.mac_total),
            human_ops(r.printed_total),
            r.printed_over_mac
        ));
    }
    s
}
