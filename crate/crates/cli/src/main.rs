//! `headfed`: run federated head-pruning experiments and cost estimates.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::CliError;

#[derive(Parser, Debug)]
#[command(name = "headfed", version, about = "Federated LoRA fine-tuning with attention head pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment and write a self-contained run directory.
    Run(RunArgs),
    /// Run the pruning × client-selection grid on one config.
    Ablate(RunArgs),
    /// Run importance pruning at several sparsities.
    Sweep(SweepArgs),
    /// Communication and MAC estimates for a reference architecture.
    Cost(CostArgs),
    /// Print the fully resolved config as TOML.
    Config(ConfigArgs),
}

#[derive(Args, Debug, Clone)]
struct Overrides {
    /// TOML experiment config. Every field has a default; omit to use them all.
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set model.rank=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    sparsity: Option<f64>,
    #[arg(long, value_parser = ["none", "random", "importance"])]
    pruning: Option<String>,
    #[arg(long, value_parser = ["random", "loss"])]
    selection: Option<String>,
    #[arg(long, value_parser = ["fedavg", "weighted"])]
    aggregation: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Client-training threads; 0 uses every core. Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Run directory. Defaults to a fresh directory under the runs root.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root for generated run directories.
    #[arg(long, env = "HEADFED_RUNS_DIR", default_value = "runs")]
    runs_dir: PathBuf,
    /// No per-round progress on stderr.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Sparsities to run.
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,0.9")]
    grid: Vec<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OutputFormat {
    Text,
    Csv,
}

#[derive(Args, Debug)]
struct CostArgs {
    /// Preset name, or `all`.
    arch: String,
    /// PEFT methods; `all` for every method.
    #[arg(default_value = "lora")]
    methods: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.9")]
    sparsity: Vec<f64>,
    /// `head-skip` or `lora-backward`.
    #[arg(long, default_value = "head-skip")]
    accounting: String,
    #[arg(long, value_enum, default_value = "text")]
    format: OutputFormat,
    /// Also write the table as CSV to this file.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    #[command(flatten)]
    overrides: Overrides,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => commands::run(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Cost(a) => commands::cost(&a),
        Command::Config(a) => commands::print_config(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

impl Overrides {
    fn collect(&self) -> Result<Vec<config::Override>, CliError> {
        use serde_json::json;
        let mut out = Vec::new();
        for raw in &self.set {
            out.push(config::Override::parse(raw)?);
        }
        if let Some(v) = &self.pruning {
            out.push(config::Override::new("pruning", json!(v)));
        }
        if let Some(v) = self.sparsity {
            out.push(config::Override::new("sparsity", json!(v)));
        }
        if let Some(v) = &self.selection {
            out.push(config::Override::new("selection", json!(v)));
        }
        if let Some(v) = &self.aggregation {
            out.push(config::Override::new("aggregation", json!(v)));
        }
        if let Some(v) = self.rounds {
            out.push(config::Override::new("rounds", json!(v)));
        }
        if let Some(v) = self.seed {
            out.push(config::Override::new("seed", json!(v)));
        }
        if let Some(v) = self.threads {
            out.push(config::Override::new("threads", json!(v)));
        }
        Ok(out)
    }
}
