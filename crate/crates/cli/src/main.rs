//! `a2po`: dataset generation, training, evaluation, advantage sweeps and
//! latent exports for the toy offline-RL tasks.
//!
//! Exit codes: 0 success, 2 usage or validation failure, 3 numerical abort.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "a2po", version, about = "Advantage-aware offline policy optimization on toy tasks")]
struct Cli {
    /// Output root; defaults to $A2PO_OUT, then `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Collect per-tier datasets or one proportioned mix.
    GenData(GenDataArgs),
    /// Train one run per seed.
    Train(TrainArgs),
    /// Evaluate a checkpoint at one advantage condition.
    Eval(EvalArgs),
    /// Evaluate a checkpoint across several advantage conditions.
    Sweep(SweepArgs),
    /// Write latent codes, their PCA projection and rollout returns as CSV.
    ExportLatent(ExportArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub env: String,
    /// Mixture such as `random:0.5,expert:0.5`; writes one mixed file.
    #[arg(long)]
    pub mix: Option<String>,
    /// Transitions in the mixed file.
    #[arg(long, default_value_t = 10_000)]
    pub total: usize,
    /// Tiers written as separate files when no mix is given.
    #[arg(long, default_value = "random,medium,expert")]
    pub tiers: String,
    /// Transitions per tier file.
    #[arg(long, default_value_t = 10_000)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Explicit path for the mixed file.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<String>,
    /// Comma-separated seed list.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Override any config key, e.g. `--set total_steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct CheckpointArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Seed for the evaluation stream; defaults to the run's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file; defaults to stdout only.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CheckpointArgs,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub xi: f64,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CheckpointArgs,
    #[arg(long, default_value = "-1,0,1", allow_hyphen_values = true)]
    pub xis: String,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV path; defaults to `<out>/latent.csv`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn output_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("A2PO_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = output_root(cli.out);
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a, &root),
        Command::Train(a) => commands::train(&a, &root),
        Command::Eval(a) => commands::eval(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::ExportLatent(a) => commands::export_latent(&a, &root),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
