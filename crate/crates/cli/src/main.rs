use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Event-driven hierarchical sequence model: data generation, training,
/// evaluation and detector sweeps.
#[derive(Debug, Parser)]
#[command(name = "vpr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `training.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. Defaults to `output_dir` from the config, then to
    /// `$VPR_OUT_ROOT/<command>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a dataset as newline-delimited JSON.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Number of sequences.
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Sequence length; the configured training length when absent.
        #[arg(long)]
        length: Option<usize>,
    },
    /// Train a model, writing checkpoints and an append-only metrics log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint; its configuration is used.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `training.iterations`.
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Score boundaries on this dataset file instead of generated episodes.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Comma-separated: f1, update_rate, disentanglement, rollout, kl_parts.
        #[arg(long, value_delimiter = ',', default_value = "f1")]
        metrics: Vec<String>,
        /// One-based level for rollouts.
        #[arg(long)]
        level: Option<usize>,
        /// Rollout length.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train one model per detector setting and seed, then aggregate F1.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Axes such as `gamma=1.1,1.2;window=25,50`.
        #[arg(
            long,
            default_value = "gamma=1.05,1.1,1.15,1.2;window=25,50,100,200,400"
        )]
        grid: String,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Overrides `training.iterations` for every cell.
        #[arg(long)]
        iterations: Option<u64>,
        /// Worker threads; all available cores when absent.
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e
                .downcast_ref::<vpr_core::VprError>()
                .is_some_and(vpr_core::VprError::is_validation);
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}
