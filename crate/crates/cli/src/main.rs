//! `semkge`: partitioning, training and evaluation from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
//! divergence.

mod commands;
mod manifest;
mod presets;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "semkge", version, about = "Semantic partitioning for knowledge-graph embedding training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Class frequency report: class, depth, direct count, closure count.
    AnalyzeClasses(AnalyzeArgs),
    /// Split the training triples into partitions.
    Partition(PartitionArgs),
    /// Choose a budgeted subset of the training triples.
    SelectSubgraph(SelectArgs),
    /// Train embeddings.
    Train(TrainArgs),
    /// Link-prediction evaluation of trained embeddings.
    EvalLp(EvalLpArgs),
    /// Entity-typing evaluation of trained embeddings.
    EvalEt(EvalEtArgs),
    /// Partition, train and evaluate in one run.
    Pipeline(PipelineArgs),
}

/// Where the input files come from.
#[derive(Args, Clone, Debug)]
pub struct DataArgs {
    /// Dataset name, resolved to `$SEMKGE_DATA_DIR/<name>/`; also selects
    /// the hyperparameter preset.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Dataset directory with train.txt, valid.txt, test.txt and optionally
    /// entity_types.tsv and class_hierarchy.tsv.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Entity type assertions (entity TAB class).
    #[arg(long)]
    pub types: Option<PathBuf>,
    /// Subclass edges (subclass TAB superclass).
    #[arg(long)]
    pub hierarchy: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
pub struct OutArgs {
    /// Output directory. Defaults to `<runs-root>/<timestamp>-seed<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "SEMKGE_RUNS_DIR", default_value = "runs")]
    pub runs_root: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Semantic,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KeyArg {
    Head,
    Tail,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExecArg {
    Parallel,
    Sequential,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SettingArg {
    Filtered,
    Raw,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Clone, Debug)]
pub struct PlanArgs {
    #[arg(long, value_enum, default_value = "semantic")]
    pub strategy: StrategyArg,
    /// Number of partitions.
    #[arg(long)]
    pub k: usize,
    /// Which entity's class groups a triple under semantic partitioning.
    #[arg(long, value_enum, default_value = "head")]
    pub key: KeyArg,
}

#[derive(Args, Debug)]
pub struct PartitionArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub plan: PlanArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Fraction of the training triples to keep.
    #[arg(long)]
    pub p: f64,
    /// Target class for the semantic strategy.
    #[arg(long)]
    pub class: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub hops: u32,
    #[arg(long, value_enum, default_value = "semantic")]
    pub strategy: StrategyArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Clone, Debug)]
pub struct ModelArgs {
    /// transe, distmult or complex.
    #[arg(long, default_value = "transe")]
    pub model: String,
    /// A key=value file applied over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// A single key=value override, applied last. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "parallel")]
    pub exec: ExecArg,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Directory holding a plan written by `partition`. Without it a random
    /// plan with one partition per worker is used.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Continue from the checkpoint in this directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct EvalLpArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Directory with trained embeddings.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Overrides the model recorded next to the embeddings.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, value_enum, default_value = "filtered")]
    pub setting: SettingArg,
    #[arg(long, value_enum, default_value = "parallel")]
    pub exec: ExecArg,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct EvalEtArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Seed of the 80/10/10 entity split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "parallel")]
    pub exec: ExecArg,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub plan: PlanArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::AnalyzeClasses(a) => commands::analyze_classes(a),
        Command::Partition(a) => commands::partition(a),
        Command::SelectSubgraph(a) => commands::select_subgraph(a),
        Command::Train(a) => commands::train(a),
        Command::EvalLp(a) => commands::eval_lp(a),
        Command::EvalEt(a) => commands::eval_et(a),
        Command::Pipeline(a) => commands::pipeline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
