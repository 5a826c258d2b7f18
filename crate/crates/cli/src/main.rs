//! `bcrec` command-line front end: split, train, eval, synth, diagnose.

mod commands;
mod manifest;
mod settings;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use bcrec::trainer::{LossKind, NegativeSampling, Schedule};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

/// A failed command: exit code 2 for usage/config problems, 1 otherwise.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<bcrec::Error> for Failure {
    fn from(e: bcrec::Error) -> Self {
        match e {
            bcrec::Error::Config(_) | bcrec::Error::MissingTimestamp { .. } => Failure::usage(e.to_string()),
            _ => Failure::runtime(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "bcrec",
    version = concat!(env!("CARGO_PKG_VERSION"), " (", env!("BCREC_GIT_DESCRIBE"), ")"),
    about = "Bias-aware angular-margin contrastive collaborative filtering"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Random seed; overrides any seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON or TOML settings file for the command (flags take precedence).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for evaluation and diagnostics.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = "info",
          value_parser = ["off", "error", "warn", "info", "debug", "trace"])]
    log_level: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split an interaction log into train/validation/test files.
    Split(SplitArgs),
    /// Train a model on a split directory.
    Train(TrainArgs),
    /// Evaluate a saved model with all-ranking metrics.
    Eval(EvalArgs),
    /// Generate a synthetic long-tail dataset with a ground-truth test set.
    Synth(SynthArgs),
    /// Geometry and bias diagnostics for a trained model.
    Diagnose(DiagnoseArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    Temporal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoder {
    Mf,
    Lightgcn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Angles,
    Geometry,
    BiasCorr,
    SubgroupMatrix,
    BiasReport,
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    LossKind::parse(s)
        .ok_or_else(|| format!("unknown loss {s:?}; expected softmax, bc, bpr, ips-cn (BPR backbone) or ips-cn-softmax"))
}

fn parse_snake<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

fn parse_sampling(s: &str) -> Result<NegativeSampling, String> {
    parse_snake(s)
}

fn parse_schedule(s: &str) -> Result<Schedule, String> {
    parse_snake(s)
}

#[derive(Args, Debug, Serialize)]
pub struct SplitArgs {
    /// Interaction log: `user item [timestamp]` per line.
    #[arg(long)]
    #[serde(skip)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    /// tab, comma, space, whitespace or a single character.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delimiter: Option<String>,
    /// Apply k-core filtering before splitting.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_core: Option<usize>,
    /// Share of interactions for the item-balanced test (random strategy).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub balanced: Option<f64>,
    /// Train share (random) or ratio (temporal).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Directory written by `bcrec split`.
    #[arg(long)]
    #[serde(skip)]
    pub split: PathBuf,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder: Option<Encoder>,
    /// LightGCN propagation depth.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    /// softmax, bc, bpr, ips-cn or ips-cn-softmax.
    #[arg(long, value_parser = parse_loss)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossKind>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    /// L2 coefficient.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reg: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reg_popularity: Option<bool>,
    /// Temperature of the recommendation loss.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau1: Option<f64>,
    /// Temperature of the popularity extractor loss.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau2: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_negatives: Option<usize>,
    /// auto, sampled or in-batch.
    #[arg(long, value_parser = parse_sampling)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub negative_sampling: Option<NegativeSampling>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<usize>,
    /// Margin multiplier applied to the bias angle.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub margin_strength: Option<f64>,
    /// joint or two-phase.
    #[arg(long, value_parser = parse_schedule)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Schedule>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ips_clip: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cached_propagation: Option<bool>,
    /// K for the validation Recall@K that drives early stopping.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_k: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    /// `model.bin` written by `bcrec train`.
    #[arg(long)]
    #[serde(skip)]
    pub model: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub split: PathBuf,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// Comma-separated split members; defaults to every test member.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub members: Option<Vec<String>>,
    /// Include head/mid/tail breakdowns.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subgroups: Option<bool>,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_users: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_items: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    /// Zipf exponent of item popularity.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub popularity_exponent: Option<f64>,
    /// Exposure bias strength; 0 disables popularity in observation.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias_strength: Option<f64>,
    /// 0 gives popularity-only observations.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preference_sharpness: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_per_user: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_per_user: Option<usize>,
    /// Relevant-pool size per observed pair.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relevant_ratio: Option<f64>,
    /// Ground-truth pairs per observed pair.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth_ratio: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
pub struct DiagnoseArgs {
    #[arg(value_enum)]
    #[serde(skip)]
    pub which: Which,
    /// Split directory; diagnostics use its train member.
    #[arg(long)]
    #[serde(skip)]
    pub split: PathBuf,
    /// `model.bin`; needed by angles and geometry.
    #[arg(long)]
    #[serde(skip)]
    pub model: Option<PathBuf>,
    /// `extractor.bin`; needed by bias-corr, subgroup-matrix and bias-report.
    #[arg(long)]
    #[serde(skip)]
    pub extractor: Option<PathBuf>,
    /// Histogram bin width in radians.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bin_width: Option<f64>,
    /// Positives plus sampled negatives per user for angle histograms.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub items_per_user: Option<usize>,
    /// Dispersion negatives: `full` or a per-user sample count.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub negatives: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub margin_strength: Option<f64>,
}

fn init(global: &Global) -> Result<(), Failure> {
    let level: log::LevelFilter = global.log_level.parse().expect("validated by clap");
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    if let Some(n) = global.threads {
        if n == 0 {
            return Err(Failure::usage("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::runtime(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    init(&cli.global)?;
    let g = &cli.global;
    let out = g.out.clone().ok_or_else(|| Failure::usage("--out <DIR> is required"))?;
    let ctx = commands::Context {
        seed: g.seed,
        out,
        config: g.config.clone(),
    };
    match cli.command {
        Command::Split(a) => commands::split(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Diagnose(a) => commands::diagnose(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage_error = e.use_stderr();
            let _ = e.print();
            if !usage_error {
                return ExitCode::SUCCESS;
            }
            if !matches!(e.kind(), ErrorKind::MissingSubcommand | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
