mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::Failure;

#[derive(Parser)]
#[command(name = "gnn-attrib", version, about = "Training-free edge attribution for GCN, GraphSAGE and GIN models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Attribute every graph and write per-graph results plus a manifest.
    Explain(ExplainArgs),
    /// Cross-check the sweep-based attribution against brute-force expansion.
    CheckOracle(OracleArgs),
    /// Compute fidelity, discriminability or stability over a dataset.
    Eval(EvalArgs),
    /// List the term classes of a model's expansion.
    Terms(TermsArgs),
    /// Write a randomly initialized model.
    InitModel(InitModelArgs),
    /// Write a generated dataset.
    Gen(GenArgs),
}

#[derive(Args, Clone)]
#[group(id = "input", required = true, multiple = false)]
pub struct DataSource {
    /// Dataset or graph file (.json, or .csv edge list with a .json sidecar).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generated dataset, e.g. ba2motifs:200:20:7 (count:base_size:seed).
    #[arg(long = "gen", value_name = "SPEC")]
    pub generator: Option<String>,
}

#[derive(Args, Clone)]
pub struct CommonArgs {
    /// Model JSON.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub source: DataSource,
    /// Treat node features as variables that receive attribution.
    #[arg(long)]
    pub x_as_vars: bool,
    /// Skip subtraction of the zero-input baseline.
    #[arg(long)]
    pub no_calibrate: bool,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; 0 uses every core, 1 runs sequentially.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long, default_value_t = config::DEFAULT_SEED)]
    pub seed: u64,
}

#[derive(Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Sparsity levels at which explanations are extracted.
    #[arg(long, value_delimiter = ',', default_value = "0.7")]
    pub sparsity: Vec<f64>,
    /// Class to explain; defaults to each graph's predicted class.
    #[arg(long)]
    pub class: Option<usize>,
    /// Output row to explain for node-classification models.
    #[arg(long)]
    pub node: Option<usize>,
}

#[derive(Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 5)]
    pub nodes: usize,
    /// Conv layers per random model.
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Random models per architecture.
    #[arg(long, default_value_t = 10)]
    pub models: usize,
    #[arg(long, default_value_t = 3)]
    pub width: usize,
    #[arg(long, default_value_t = 2)]
    pub features: usize,
    #[arg(long, default_value_t = config::DEFAULT_SEED)]
    pub seed: u64,
    /// Perturb one weight after the trace is captured (negative control).
    #[arg(long)]
    pub inject_fault: bool,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Fidelity,
    Discriminability,
    Stability,
}

#[derive(Clone, Copy, ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingArg {
    Pooled,
    FirstClassifier,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum)]
    pub metric: Metric,
    /// Defaults to 0.5,0.6,0.7,0.8,0.9 for fidelity and 0.7 otherwise.
    #[arg(long, value_delimiter = ',')]
    pub sparsity: Option<Vec<f64>>,
    /// Largest k for stability.
    #[arg(long, default_value_t = 10)]
    pub k_max: usize,
    #[arg(long, value_enum, default_value = "pooled")]
    pub embedding: EmbeddingArg,
}

#[derive(Args)]
pub struct TermsArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub x_as_vars: bool,
}

#[derive(Args)]
pub struct InitModelArgs {
    #[arg(long, value_parser = ["gcn", "sage", "gin"])]
    pub arch: String,
    #[arg(long, default_value_t = 10)]
    pub features: usize,
    #[arg(long, default_value_t = 20)]
    pub hidden: usize,
    /// Conv layers.
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// Build a node-classification model (no pooling).
    #[arg(long)]
    pub node_level: bool,
    #[arg(long, default_value_t = config::DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GenArgs {
    /// e.g. ba2motifs:200:20:7 (count:base_size:seed).
    #[arg(long = "gen", value_name = "SPEC")]
    pub generator: String,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Explain(a) => commands::explain(a),
        Command::CheckOracle(a) => commands::check_oracle(a),
        Command::Eval(a) => commands::eval(a),
        Command::Terms(a) => commands::terms(a),
        Command::InitModel(a) => commands::init_model(a),
        Command::Gen(a) => commands::gen(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(Failure::exit_code(&e))
        }
    }
}
