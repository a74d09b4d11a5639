mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::CliError;

/// Session-based next-item recommender.
#[derive(Parser)]
#[command(name = "mtaw", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the best checkpoint, metric log and manifest.
    Train(RunArgs),
    /// Evaluate a checkpoint on a test file.
    Eval(EvalArgs),
    /// Train once per loss exponent and print one metric row per run.
    SweepGamma(SweepArgs),
    /// Print the top-K next items for a session.
    Recommend(RecommendArgs),
    /// Report trainable parameters and seconds per epoch.
    Timing(TimingArgs),
    /// Write a synthetic dataset in the native text format.
    Synth(SynthArgs),
}

/// Run configuration: a `key = value` file plus overriding flags.
#[derive(Args, Clone, Default)]
pub struct RunArgs {
    /// Config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset file format: native or pickle.
    #[arg(long)]
    pub format: Option<String>,
    /// Dataset preset: retailrocket or tmall (sets gamma unless given).
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Modulating factor gradient: detached or differentiable.
    #[arg(long)]
    pub factor: Option<String>,
    /// Any config key, as `key=value`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Vocabulary file; defaults to vocab.txt beside the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value = "native")]
    pub format: String,
    #[arg(long, default_value_t = 100)]
    pub batch_size: usize,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated exponents; a cross-entropy run is added unless 0 is listed.
    #[arg(long, value_delimiter = ',', default_values_t = [2.0, 4.0, 6.0, 8.0, 10.0])]
    pub gammas: Vec<f64>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args)]
pub struct RecommendArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Number of items to print.
    #[arg(short, long, default_value_t = 20)]
    pub k: usize,
    /// Session items, oldest first.
    #[arg(required = true)]
    pub items: Vec<String>,
}

#[derive(Args)]
pub struct TimingArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Catalog size when no training file is given.
    #[arg(long)]
    pub num_items: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum RuleKind {
    Successor,
    Permutation,
    Mixture,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "successor")]
    pub rule: RuleKind,
    #[arg(long, default_value_t = 20)]
    pub items: usize,
    #[arg(long, default_value_t = 500)]
    pub sessions: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Share of hard samples for the mixture rule.
    #[arg(long, default_value_t = 0.2)]
    pub hard_fraction: f64,
    #[arg(long, default_value_t = 1)]
    pub min_len: usize,
    #[arg(long, default_value_t = 8)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the label permutation, shared between splits.
    #[arg(long, default_value_t = 0)]
    pub rule_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MTAW_LOG", "warn")).init();
    let cli = Cli::parse();
    let result: Result<(), CliError> = match cli.command {
        Command::Train(args) => commands::train(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::SweepGamma(args) => commands::sweep_gamma(&args),
        Command::Recommend(args) => commands::recommend(&args),
        Command::Timing(args) => commands::timing(&args),
        Command::Synth(args) => commands::synth(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
