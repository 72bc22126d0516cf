//! `afsl` — train, attack, and evaluate real/fake classifiers on the
//! synthetic clip dataset, end to end from the command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 missing or malformed artifact.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::Ctx;

#[derive(Parser)]
#[command(
    name = "afsl",
    version,
    about = "Adversarial-robustness laboratory for real/fake clip classification",
    propagate_version = true
)]
struct Cli {
    /// Override the training and evaluation seeds (the dataset seed is part
    /// of the dataset config and is not affected).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Allow overwriting a non-empty output directory (gen-data, train).
    #[arg(long, global = true)]
    force: bool,

    /// Worker threads for evaluation conditions.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic clip dataset into --out
    GenData {
        /// Experiment or dataset config (JSON); built-in default when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one model per an experiment config; writes a run directory
    Train {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint under attack and distortion conditions
    Eval {
        /// Checkpoint directory (a run's checkpoint/ subdirectory).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated condition names, e.g. clean,pgd10,cw2,transfer.
        #[arg(long)]
        conditions: Option<String>,
        /// Surrogate checkpoint for the transfer condition.
        #[arg(long)]
        surrogate: Option<PathBuf>,
        /// Experiment config supplying conditions/seed when flags are absent.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the full 7x5 distortion sweep on a checkpoint
    Sweep {
        /// Checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Experiment config supplying the seed when --seed is absent.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Consolidate run reports into one comparison table
    Tables {
        /// Run directories, each containing report.json.
        runs: Vec<PathBuf>,
    },
    /// Check analytic gradients of every op and loss against finite differences
    Gradcheck {
        /// Relative-error tolerance overriding the per-op defaults.
        #[arg(long)]
        tolerance: Option<f64>,
    },
}

fn run(cli: Cli) -> afsl_core::Result<()> {
    let ctx = Ctx { seed: cli.seed, out: cli.out, force: cli.force, jobs: cli.jobs };
    match cli.command {
        Command::GenData { config } => commands::gen_data(&ctx, config.as_deref()),
        Command::Train { config, data } => commands::train(&ctx, &config, &data),
        Command::Eval { checkpoint, data, conditions, surrogate, config } => commands::eval(
            &ctx,
            &checkpoint,
            &data,
            conditions.as_deref(),
            surrogate.as_deref(),
            config.as_deref(),
        ),
        Command::Sweep { checkpoint, data, config } => {
            commands::sweep(&ctx, &checkpoint, &data, config.as_deref())
        }
        Command::Tables { runs } => commands::tables(&ctx, &runs),
        Command::Gradcheck { tolerance } => commands::gradcheck(&ctx, tolerance),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
