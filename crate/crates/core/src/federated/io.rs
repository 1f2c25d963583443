//! Checkpoints and metrics files.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, ExperimentResult, RoundMetrics};
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;

pub const CHECKPOINT_FORMAT: &str = "headfed-checkpoint";
pub const METRICS_FORMAT: &str = "headfed-metrics";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ExperimentConfig,
    pub round: usize,
    pub adapter: LoraAdapter,
}

impl Checkpoint {
    pub fn new(config: &ExperimentConfig, round: usize, adapter: &LoraAdapter) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: FORMAT_VERSION,
            config: config.clone(),
            round,
            adapter: adapter.clone(),
        }
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer(out, self)?;
        Ok(())
    }

    /// Parses and checks format, version, and that every adapter tensor has
    /// the shape the stored model config implies.
    pub fn read(json: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(json)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != FORMAT_VERSION {
            return Err(Error::Decode(format!(
                "expected {CHECKPOINT_FORMAT} v{FORMAT_VERSION}, found {} v{}",
                ck.format, ck.version
            )));
        }
        ck.config.validate()?;
        let want = LoraAdapter::zeros(&ck.config.model);
        let (have, want) = (ck.adapter.tensors(), want.tensors());
        let shapes_match =
            have.len() == want.len() && have.iter().zip(&want).all(|(h, w)| h.shape() == w.shape() && h.data().len() == w.len());
        if !shapes_match {
            return Err(Error::Decode("checkpoint adapter does not match its model config".into()));
        }
        if !ck.adapter.is_finite() {
            return Err(Error::Decode("checkpoint adapter is not finite".into()));
        }
        Ok(ck)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsHeader {
    pub format: String,
    pub version: u32,
    pub initial_loss: f64,
    pub initial_accuracy: f64,
}

/// One header line, then one line per round.
pub fn write_metrics_header<W: Write>(out: &mut W, initial_loss: f64, initial_accuracy: f64) -> Result<()> {
    let header = MetricsHeader {
        format: METRICS_FORMAT.into(),
        version: FORMAT_VERSION,
        initial_loss,
        initial_accuracy,
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn write_metrics_line<W: Write>(out: &mut W, m: &RoundMetrics) -> Result<()> {
    serde_json::to_writer(&mut *out, m)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_metrics<R: BufRead>(input: R) -> Result<(MetricsHeader, Vec<RoundMetrics>)> {
    let mut lines = input.lines();
    let first = lines.next().ok_or_else(|| Error::Decode("empty metrics file".into()))??;
    let header: MetricsHeader = serde_json::from_str(&first)?;
    if header.format != METRICS_FORMAT || header.version != FORMAT_VERSION {
        return Err(Error::Decode(format!(
            "expected {METRICS_FORMAT} v{FORMAT_VERSION}, found {} v{}",
            header.format, header.version
        )));
    }
    let mut rounds = Vec::new();
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            rounds.push(serde_json::from_str(&line)?);
        }
    }
    Ok((header, rounds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub format_version: u32,
    pub label: String,
    pub seed: u64,
    pub selection: String,
    pub aggregation: String,
    pub pruning: String,
    pub sparsity: f64,
    pub rounds: usize,
    pub final_accuracy: f64,
    pub final_loss: f64,
    /// Empty when the threshold was never reached.
    pub convergence_round: Option<usize>,
    pub total_bytes: u64,
    pub total_train_ops: f64,
}

fn tag<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

impl SummaryRow {
    pub fn from_result(label: &str, r: &ExperimentResult) -> Self {
        let c = &r.config;
        Self {
            format_version: FORMAT_VERSION,
            label: label.into(),
            seed: c.seed,
            selection: tag(&c.selection),
            aggregation: tag(&c.aggregation),
            pruning: tag(&c.pruning),
            sparsity: c.effective_sparsity(),
            rounds: r.rounds.len(),
            final_accuracy: r.final_accuracy(),
            final_loss: r.rounds.last().map_or(r.initial.loss, |m| m.loss),
            convergence_round: r.convergence_round,
            total_bytes: r.rounds.iter().map(|m| m.bytes).sum(),
            total_train_ops: r.rounds.iter().map(|m| m.train_ops).sum(),
        }
    }
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary_csv<R: std::io::Read>(input: R) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_reader(input);
    let rows = r.deserialize().collect::<std::result::Result<Vec<SummaryRow>, _>>()?;
    Ok(rows)
}
