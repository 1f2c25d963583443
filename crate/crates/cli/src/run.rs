use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use headfed_core::federated::io::{write_metrics_header, write_metrics_line, Checkpoint, SummaryRow, FORMAT_VERSION};
use headfed_core::federated::{convergence_round, stream_seeds, Simulation};
use headfed_core::{ExperimentConfig, ExperimentResult};
use serde::{Deserialize, Serialize};

use crate::config::{CliError, CliResult};

pub const MANIFEST_FORMAT: &str = "headfed-manifest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub label: String,
    pub overrides: Vec<String>,
    pub config: ExperimentConfig,
    pub seeds: BTreeMap<String, u64>,
    pub status: String,
    pub error: Option<String>,
    pub round_wall_seconds: Vec<f64>,
    pub outputs: BTreeMap<String, String>,
}

/// Everything needed to repeat a run on the same build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub command: String,
    /// Command-line overrides in the order they were applied.
    pub overrides: Vec<String>,
    pub config: ExperimentConfig,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: String,
    /// One entry per experiment the command ran.
    pub cells: Vec<CellRecord>,
    pub outputs: BTreeMap<String, String>,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn seeds_of(cfg: &ExperimentConfig) -> BTreeMap<String, u64> {
    let mut m: BTreeMap<String, u64> = stream_seeds(cfg.seed).into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    m.insert("experiment".into(), cfg.seed);
    m
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig, overrides: Vec<String>) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            overrides,
            config: config.clone(),
            started_unix: now_unix(),
            finished_unix: None,
            status: "running".into(),
            cells: Vec::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn save(&self, dir: &Path) -> CliResult<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(dir.join("manifest.json"), json + "\n")?;
        Ok(())
    }

    pub fn finish(&mut self, ok: bool) {
        self.finished_unix = Some(now_unix());
        self.status = if ok { "completed" } else { "failed" }.into();
    }
}

/// Picks the run directory and makes sure it is free.
pub fn prepare_dir(out: Option<&Path>, runs_dir: &Path, command: &str, cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let dir = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let base = format!("{command}-s{}-{}", cfg.seed, now_unix());
            let mut candidate = runs_dir.join(&base);
            let mut n = 1;
            while candidate.exists() {
                candidate = runs_dir.join(format!("{base}-{n}"));
                n += 1;
            }
            candidate
        }
    };
    if dir.join("manifest.json").exists() {
        return Err(CliError::Usage(format!(
            "{} already holds a run; choose another --out",
            dir.display()
        )));
    }
    fs::create_dir_all(&dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn file_name(label: &str, stem: &str, ext: &str) -> String {
    if label.is_empty() {
        format!("{stem}.{ext}")
    } else {
        format!("{stem}-{label}.{ext}")
    }
}

fn write_checkpoint(dir: &Path, name: &str, cfg: &ExperimentConfig, round: usize, ck: &headfed_core::LoraAdapter) -> headfed_core::Result<()> {
    let mut w = BufWriter::new(File::create(dir.join(name))?);
    Checkpoint::new(cfg, round, ck).write(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Runs one experiment, streaming metrics to disk as rounds finish. On
/// failure the metrics written so far stay on disk and the cell is marked
/// failed.
pub fn execute(
    dir: &Path,
    label: &str,
    cfg: &ExperimentConfig,
    overrides: Vec<String>,
    quiet: bool,
) -> (CellRecord, CliResult<ExperimentResult>) {
    let metrics_name = file_name(label, "metrics", "jsonl");
    let mut record = CellRecord {
        label: label.into(),
        overrides,
        config: cfg.clone(),
        seeds: seeds_of(cfg),
        status: "running".into(),
        error: None,
        round_wall_seconds: Vec::new(),
        outputs: BTreeMap::from([("metrics".to_string(), metrics_name.clone())]),
    };
    let mut walls = Vec::new();
    let result = (|| -> CliResult<ExperimentResult> {
        let mut metrics = BufWriter::new(File::create(dir.join(&metrics_name))?);
        let mut sim = Simulation::new(cfg.clone())?;
        write_metrics_header(&mut metrics, sim.initial.loss, sim.initial.accuracy)?;
        metrics.flush()?;
        let mut rounds = Vec::with_capacity(cfg.rounds);
        for _ in 0..cfg.rounds {
            let m = sim.run_round()?;
            write_metrics_line(&mut metrics, &m)?;
            metrics.flush()?;
            walls.push(m.wall_seconds);
            let every = cfg.checkpoint_every;
            if every > 0 && m.round % every == 0 && m.round < cfg.rounds {
                let name = file_name(label, &format!("checkpoint-round{}", m.round), "json");
                write_checkpoint(dir, &name, cfg, m.round, &sim.global.adapter)?;
            }
            if !quiet {
                let tag = if label.is_empty() { String::new() } else { format!("[{label}] ") };
                eprintln!(
                    "{tag}round {:>4}  acc {:.4}  loss {:.4}  clients {:?}",
                    m.round, m.accuracy, m.loss, m.selected
                );
            }
            rounds.push(m);
        }
        let ck = file_name(label, "checkpoint-final", "json");
        write_checkpoint(dir, &ck, cfg, rounds.len(), &sim.global.adapter)?;
        Ok(ExperimentResult {
            convergence_round: convergence_round(&rounds, cfg.accuracy_threshold),
            config: cfg.clone(),
            initial: sim.initial,
            rounds,
            final_adapter: sim.global.adapter,
        })
    })();
    record.round_wall_seconds = walls;
    match &result {
        Ok(_) => {
            record.status = "completed".into();
            record
                .outputs
                .insert("checkpoint".into(), file_name(label, "checkpoint-final", "json"));
        }
        Err(e) => {
            record.status = "failed".into();
            record.error = Some(e.to_string());
        }
    }
    (record, result)
}

pub fn write_summary(dir: &Path, name: &str, rows: &[SummaryRow]) -> CliResult<()> {
    let f = File::create(dir.join(name))?;
    headfed_core::federated::io::write_summary_csv(rows, BufWriter::new(f))?;
    Ok(())
}
