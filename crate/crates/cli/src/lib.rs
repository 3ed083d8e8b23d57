//! Command-line front end: argument parsing, configuration and file output
//! around the `maxentmil` library.
//!
//! Exit codes: 0 on success, 1 on any error, 2 when the run completed but a
//! solver flagged its result (non-convergence, fallbacks, failed
//! repetitions). Warnings are printed to stderr and stored in the outputs.

pub mod commands;
pub mod config;
pub mod io;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::config::{FitSolver, SynthKind};

#[derive(Debug, Parser)]
#[command(
    name = "maxentmil",
    version,
    about = "Maximum-entropy densities for multi-instance bags"
)]
pub struct Cli {
    /// Worker threads for the parallel parts (default: all cores).
    #[arg(long, global = true, env = "MAXENTMIL_THREADS")]
    pub threads: Option<usize>,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every command.
#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; flags below override it.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(short, long)]
    pub out: PathBuf,
    /// Global seed; replaces the seed of every configuration block.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit densities to a dataset and write model.json and report.json.
    Fit {
        /// Dataset (.jsonl or .csv).
        dataset: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        solver: Option<FitSolver>,
        /// Number of features (even).
        #[arg(long)]
        m: Option<usize>,
        /// Regularization weight for --solver rmde.
        #[arg(long)]
        eta: Option<f64>,
        /// Confidence multiplier of the cmen solver.
        #[arg(long)]
        a: Option<f64>,
        /// Take basis, domain and grid from this model file.
        #[arg(long)]
        basis_from: Option<PathBuf>,
        /// Standardize instances before the feature map.
        #[arg(long)]
        standardize: bool,
    },
    /// Recovery-probability grid over (m, T); completed cells are reused.
    PhaseDiagram {
        #[command(flatten)]
        common: Common,
        /// cmen, rmde-continuation, rmde-cv or both (cmen and
        /// rmde-continuation on shared data).
        #[arg(long)]
        solver: Option<String>,
        /// Comma-separated feature counts.
        #[arg(long)]
        m_values: Option<String>,
        /// Comma-separated true ranks.
        #[arg(long)]
        t_values: Option<String>,
        #[arg(long)]
        reps: Option<usize>,
        /// Instances per bag.
        #[arg(long)]
        n: Option<usize>,
        /// Number of bags.
        #[arg(long)]
        bags: Option<usize>,
    },
    /// Pairwise symmetric KL of the densities in a model file.
    KlMatrix {
        model: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Also write the kernel exp(-gamma D).
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Citation-kNN classification: k-fold on TRAIN, or train/test when
    /// TEST is given.
    Classify {
        train: PathBuf,
        test: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        /// kl-cmen, kl-rmde, kl-mde, kl-kde or hausdorff.
        #[arg(long)]
        distance: Option<String>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        pca_dim: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        k_prime: Option<usize>,
        /// Also write the training kernel exp(-gamma D).
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Monte Carlo exceedance of the confidence bound.
    BoundCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
        /// Comma-separated confidence multipliers.
        #[arg(long)]
        a_values: Option<String>,
        #[arg(long)]
        bags: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Write a synthetic dataset (and its ground truth for lowrank).
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: Option<SynthKind>,
        #[arg(long)]
        bags: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        /// True rank (lowrank only).
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Timings of summarization, KL matrix and Hausdorff versus bag size.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated bag sizes.
        #[arg(long)]
        sizes: Option<String>,
        #[arg(long)]
        min_seconds: Option<f64>,
    },
}

/// Warnings of a completed run.
#[derive(Debug, Default)]
pub struct Outcome {
    pub warnings: Vec<String>,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::run(cli) {
        Ok(out) if out.warnings.is_empty() => 0,
        Ok(out) => {
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            2
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub type CliResult = Result<Outcome>;
