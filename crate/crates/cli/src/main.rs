//! `das2` — config-driven experiment runner for deep adaptive sampling
//! surrogate training.

mod config;
mod run;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "das2",
    about = "Adaptive-sampling surrogate training for parametric differential equations",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment from a JSON config, writing artifacts to the
    /// output directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a surrogate checkpoint against a problem's reference
    /// solution on a validation grid.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Problem name: param_ode or oplearn_cheb.
        #[arg(long)]
        problem: String,
        /// Grid spec: "256x256" (param_ode) or "box:1000,ball:1000,x:101"
        /// (oplearn_cheb).
        #[arg(long)]
        grid: String,
        /// Seed for validation-set draws (operator problems).
        #[arg(long, default_value_t = 0)]
        val_seed: u64,
        /// Optional CSV of pointwise errors.
        #[arg(long)]
        pointwise: Option<PathBuf>,
    },
    /// Draw points from a flow checkpoint as CSV.
    Sample {
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        /// Keep only points inside the target domain (prints the
        /// acceptance rate).
        #[arg(long)]
        restrict: bool,
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let threads = das2_core::parallel::configure_from_env();
    if threads > 1 {
        eprintln!("parallelism: {threads} threads");
    }
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run { config, seed, out } => run::run_experiment(&config, seed, out),
        Cmd::Eval { checkpoint, problem, grid, val_seed, pointwise } => {
            run::eval_checkpoint(&checkpoint, &problem, &grid, val_seed, pointwise)
        }
        Cmd::Sample { flow, n, seed, restrict, out } => {
            run::sample_flow(&flow, n, seed, restrict, out)
        }
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
