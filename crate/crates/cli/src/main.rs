mod eval;
mod generate;
mod report;
mod settings;
mod svg;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use settings::{Settings, UsageError};

/// Dual-stream forecasting with physical priors: data generation, training,
/// evaluation and reporting.
#[derive(Parser, Debug)]
#[command(name = "dspr", version)]
struct Cli {
    /// JSON object supplying any flag by name; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Write a synthetic dataset directory.
    Generate(GenerateArgs),
    /// Train one variant and write its run record and checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Assemble tables and figures from run directories.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    #[value(name = "transport_delay")]
    TransportDelay,
    #[value(name = "conservation")]
    Conservation,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    kind: Option<Kind>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overridden by the DSPR_SEED environment variable.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_steps: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    /// Conservation only: proportional outlet leak.
    #[arg(long)]
    leak: Option<f64>,
    /// Conservation only: inflow-to-outlet delay in steps.
    #[arg(long)]
    delay: Option<usize>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// full | no_prior | shuffled_prior | no_adaptive_window | trend_only | pgnn | arx
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    pgnn_lambda: Option<f64>,
    #[arg(long)]
    arx_p: Option<usize>,
    #[arg(long)]
    arx_q: Option<usize>,
    #[arg(long)]
    lookback: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    val_stride: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_node: Option<usize>,
    #[arg(long)]
    trend_d_model: Option<usize>,
    #[arg(long)]
    trend_depth: Option<usize>,
    #[arg(long)]
    trend_scales: Option<usize>,
    #[arg(long)]
    ma_kernel: Option<usize>,
    #[arg(long)]
    tau_max: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda_sparse: Option<f64>,
    /// Add learned positional embeddings to the dynamic branch.
    #[arg(long)]
    positional: bool,
    /// Replace an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory for the reports; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also report High/Medium/Low volatility tertiles.
    #[arg(long)]
    regimes: bool,
    /// Must match the checkpoint's lookback.
    #[arg(long)]
    lookback: Option<usize>,
    /// val | test
    #[arg(long)]
    split: Option<String>,
    /// Steps per TDA segment (default: 4, halved until two fit the horizon).
    #[arg(long)]
    tda_segment: Option<usize>,
    /// Absolute TDA significance threshold (default: 0.1 x std of the truth).
    #[arg(long)]
    tda_delta: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    runs: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let settings = Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::Generate(a) => generate::run(a, &settings),
        Command::Train(a) => train::run(a, &settings),
        Command::Eval(a) => eval::run(a, &settings),
        Command::Report(a) => report::run(a, &settings),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
