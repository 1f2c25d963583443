use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use headfed_core::cost::{cost_table, render_text, write_csv, ArchSpec, PeftMethod, PruneAccounting, PRESETS};
use headfed_core::federated::io::{SummaryRow, FORMAT_VERSION};
use headfed_core::federated::PruningMode;
use headfed_core::{AggregationMode, ExperimentConfig, ExperimentResult, SelectionMode};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{self, CliError, CliResult, Override};
use crate::run::{execute, prepare_dir, write_summary, RunManifest};
use crate::{ConfigArgs, CostArgs, OutputFormat, RunArgs, SweepArgs};

/// Sparsity for pruned ablation cells when the config leaves it at zero.
const ABLATION_FALLBACK_SPARSITY: f64 = 0.5;

struct Cell {
    label: String,
    overrides: Vec<Override>,
}

fn strings(o: &[Override]) -> Vec<String> {
    o.iter().map(ToString::to_string).collect()
}

/// Runs each cell in its own file set under one run directory.
fn run_cells(
    command: &str,
    args: &RunArgs,
    cells: Vec<Cell>,
    extra_outputs: &[(&str, &str)],
) -> CliResult<(PathBuf, Vec<(String, ExperimentResult)>)> {
    let base_overrides = args.overrides.collect()?;
    let path = args.overrides.config.as_deref();
    let base = config::resolve(path, &base_overrides)?;
    let mut resolved = Vec::with_capacity(cells.len());
    for c in &cells {
        let mut all = base_overrides.clone();
        all.extend(c.overrides.iter().cloned());
        resolved.push(config::resolve(path, &all)?);
    }
    let dir = prepare_dir(args.out.as_deref(), &args.runs_dir, command, &base)?;
    let mut manifest = RunManifest::new(command, &base, strings(&base_overrides));
    manifest.outputs.insert("summary".into(), "summary.csv".into());
    for (k, v) in extra_outputs {
        manifest.outputs.insert(k.to_string(), v.to_string());
    }
    manifest.save(&dir)?;

    let mut results = Vec::with_capacity(cells.len());
    let mut failure = None;
    for (cell, cfg) in cells.iter().zip(&resolved) {
        let (record, res) = execute(&dir, &cell.label, cfg, strings(&cell.overrides), args.quiet);
        manifest.cells.push(record);
        manifest.save(&dir)?;
        match res {
            Ok(r) => results.push((cell.label.clone(), r)),
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    let rows: Vec<SummaryRow> = results.iter().map(|(l, r)| SummaryRow::from_result(l, r)).collect();
    write_summary(&dir, "summary.csv", &rows)?;
    manifest.finish(failure.is_none());
    manifest.save(&dir)?;
    eprintln!("run directory: {}", dir.display());
    match failure {
        Some(e) => Err(CliError::Runtime(e.to_string())),
        None => Ok((dir, results)),
    }
}

pub fn run(args: &RunArgs) -> CliResult<()> {
    let cell = Cell {
        label: String::new(),
        overrides: vec![],
    };
    let (_, results) = run_cells("run", args, vec![cell], &[])?;
    let (_, r) = &results[0];
    println!(
        "final accuracy {:.4}, convergence round {}",
        r.final_accuracy(),
        r.convergence_round.map_or("-".to_string(), |c| c.to_string())
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub format_version: u32,
    pub pruning: String,
    pub selection: String,
    pub aggregation: String,
    pub sparsity: f64,
    pub final_accuracy: f64,
    pub convergence_round: Option<usize>,
    pub total_bytes: u64,
    pub mean_upload_bytes: f64,
    pub total_train_ops: f64,
    pub mean_ops_per_sequence: f64,
}

fn tag<T: Serialize>(v: &T) -> String {
    json!(v).as_str().unwrap_or_default().to_string()
}

impl AblationRow {
    fn from_result(r: &ExperimentResult) -> Self {
        let uploads: Vec<_> = r.rounds.iter().flat_map(|m| &m.clients).collect();
        let n = uploads.len().max(1) as f64;
        Self {
            format_version: FORMAT_VERSION,
            pruning: tag(&r.config.pruning),
            selection: tag(&r.config.selection),
            aggregation: tag(&r.config.aggregation),
            sparsity: r.config.effective_sparsity(),
            final_accuracy: r.final_accuracy(),
            convergence_round: r.convergence_round,
            total_bytes: uploads.iter().map(|c| c.bytes).sum(),
            mean_upload_bytes: uploads.iter().map(|c| c.bytes as f64).sum::<f64>() / n,
            total_train_ops: uploads.iter().map(|c| c.train_ops).sum(),
            mean_ops_per_sequence: uploads.iter().map(|c| c.ops_per_sequence).sum::<f64>() / n,
        }
    }
}

/// The six ablation cells. Importance pruning merges `B` with importance
/// weights; the other cells use plain sample-count averaging.
fn ablation_cells(base: &ExperimentConfig) -> Vec<Cell> {
    let sparsity = if base.sparsity > 0.0 {
        base.sparsity
    } else {
        ABLATION_FALLBACK_SPARSITY
    };
    let mut cells = Vec::new();
    for pruning in [PruningMode::None, PruningMode::Random, PruningMode::Importance] {
        for selection in [SelectionMode::Random, SelectionMode::Loss] {
            let aggregation = match pruning {
                PruningMode::Importance => AggregationMode::Weighted,
                _ => AggregationMode::Fedavg,
            };
            let mut o = vec![
                Override::new("pruning", json!(pruning)),
                Override::new("selection", json!(selection)),
                Override::new("aggregation", json!(aggregation)),
            ];
            if pruning != PruningMode::None {
                o.push(Override::new("sparsity", json!(sparsity)));
            }
            cells.push(Cell {
                label: format!("{}-{}", tag(&pruning), tag(&selection)),
                overrides: o,
            });
        }
    }
    cells
}

pub fn ablate(args: &RunArgs) -> CliResult<()> {
    let base = config::resolve(args.overrides.config.as_deref(), &args.overrides.collect()?)?;
    let (dir, results) = run_cells("ablate", args, ablation_cells(&base), &[("ablation", "ablation.csv")])?;
    let rows: Vec<AblationRow> = results.iter().map(|(_, r)| AblationRow::from_result(r)).collect();
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("ablation.csv"))?));
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush()?;
    print!("{}", render_ablation(&rows));
    Ok(())
}

pub fn render_ablation(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<11} {:<9} {:<9} {:>8} {:>9} {:>12} {:>12}\n",
        "pruning", "selection", "aggreg", "accuracy", "converge", "upload_B", "train_ops"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<11} {:<9} {:<9} {:>8.4} {:>9} {:>12.0} {:>12}\n",
            r.pruning,
            r.selection,
            r.aggregation,
            r.final_accuracy,
            r.convergence_round.map_or("-".to_string(), |c| c.to_string()),
            r.mean_upload_bytes,
            headfed_core::cost::human_ops(r.total_train_ops),
        ));
    }
    s
}

pub fn sweep(args: &SweepArgs) -> CliResult<()> {
    if args.grid.is_empty() {
        return Err(CliError::Usage("sweep needs at least one sparsity".into()));
    }
    let cells = args
        .grid
        .iter()
        .map(|&s| Cell {
            label: format!("s{s}"),
            overrides: vec![
                Override::new("pruning", json!("importance")),
                Override::new("sparsity", json!(s)),
            ],
        })
        .collect();
    let (_, results) = run_cells("sweep", &args.run, cells, &[])?;
    for (label, r) in &results {
        println!(
            "{label:<8} accuracy {:.4}  convergence {}",
            r.final_accuracy(),
            r.convergence_round.map_or("-".to_string(), |c| c.to_string())
        );
    }
    Ok(())
}

fn parse_methods(raw: &[String]) -> CliResult<Vec<PeftMethod>> {
    if raw.iter().any(|m| m == "all") {
        return Ok(PeftMethod::ALL.to_vec());
    }
    raw.iter()
        .map(|m| {
            m.parse::<PeftMethod>().map_err(|_| {
                let names: Vec<&str> = PeftMethod::ALL.iter().map(|m| m.as_str()).collect();
                CliError::Usage(format!("unknown method '{m}'; available: {}", names.join(", ")))
            })
        })
        .collect()
}

pub fn cost(args: &CostArgs) -> CliResult<()> {
    let archs = if args.arch == "all" {
        PRESETS
            .iter()
            .map(|p| ArchSpec::preset(p.0))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Runtime(e.to_string()))?
    } else {
        vec![ArchSpec::preset(&args.arch).map_err(|e| CliError::Usage(e.to_string()))?]
    };
    let methods = parse_methods(&args.methods)?;
    let accounting: PruneAccounting = args
        .accounting
        .parse()
        .map_err(|_| CliError::Usage(format!("unknown accounting '{}'", args.accounting)))?;
    let rows = cost_table(&archs, &methods, &args.sparsity, accounting).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(path) = &args.csv {
        write_csv(&rows, BufWriter::new(File::create(path)?))?;
    }
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match args.format {
        OutputFormat::Text => {
            out.write_all(render_text(&rows).as_bytes())?;
            writeln!(
                out,
                "MAC_ops: standard multiply-accumulate count; printed: published per-layer formulas taken literally"
            )?;
        }
        OutputFormat::Csv => write_csv(&rows, &mut out)?,
    }
    Ok(())
}

pub fn print_config(args: &ConfigArgs) -> CliResult<()> {
    let cfg = config::resolve(args.overrides.config.as_deref(), &args.overrides.collect()?)?;
    print!("{}", config::to_toml(&cfg)?);
    Ok(())
}
