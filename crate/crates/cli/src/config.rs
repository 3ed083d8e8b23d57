//! Run configuration: one JSON document with a block per command.
//!
//! Every field has a default, unknown keys are rejected, and command-line
//! flags are applied on top before the resolved document is written next
//! to the outputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use maxentmil::experiments::{BenchSpec, ClassificationFixture, PhaseDiagramSpec};
use maxentmil::mil::PipelineConfig;
use maxentmil::{CmenaConfig, GridKind, NewtonConfig, RmdeConfig};
use serde::{Deserialize, Serialize};

use crate::io;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the seed of every block below.
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    /// `error`, `warn`, `info`, `debug` or `trace`.
    pub verbosity: String,
    pub fit: FitConfig,
    pub classify: ClassifyConfig,
    pub phase_diagram: PhaseDiagramSpec,
    pub bound_check: BoundCheckConfig,
    pub synth: SynthConfig,
    pub bench: BenchSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            threads: None,
            verbosity: "warn".to_string(),
            fit: FitConfig::default(),
            classify: ClassifyConfig::default(),
            phase_diagram: PhaseDiagramSpec::default(),
            bound_check: BoundCheckConfig::default(),
            synth: SynthConfig::default(),
            bench: BenchSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => io::read_json(p),
            None => Ok(RunConfig::default()),
        }
    }

    /// Pushes the global seed into every block.
    pub fn resolve_seed(&mut self) {
        if let Some(s) = self.seed {
            self.fit.basis_seed = s;
            self.classify.pipeline.basis_seed = s;
            self.classify.seed = s;
            self.phase_diagram.base_seed = s;
            self.bound_check.seed = s;
            self.synth.seed = s;
            self.synth.classification.seed = s;
            self.bench.seed = s;
        }
    }

    pub fn log_level(&self) -> Result<log::LevelFilter> {
        self.verbosity
            .parse()
            .map_err(|_| anyhow::anyhow!("unknown verbosity {:?}", self.verbosity))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FitSolver {
    /// Independent per-bag maximum likelihood.
    Mde,
    /// Nuclear-norm regularized fit at a fixed `eta`.
    Rmde,
    RmdeContinuation,
    Cmen,
}

impl FitSolver {
    pub fn name(self) -> &'static str {
        match self {
            FitSolver::Mde => "mde",
            FitSolver::Rmde => "rmde",
            FitSolver::RmdeContinuation => "rmde-continuation",
            FitSolver::Cmen => "cmen",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub solver: FitSolver,
    pub m: usize,
    pub basis_seed: u64,
    /// Take basis, domain and grid from an existing model file (for
    /// instance the `truth.json` written by `synth`) instead of building
    /// them from `m`, `basis_seed` and the data.
    pub basis_from: Option<PathBuf>,
    pub domain_margin: f64,
    /// Quadrature; by default a 64-point tensor grid up to 3-D and Monte
    /// Carlo beyond.
    pub grid: Option<GridKind>,
    pub standardize: bool,
    pub pca_dim: Option<usize>,
    /// Regularization weight of the `rmde` solver.
    pub eta: Option<f64>,
    pub newton: NewtonConfig,
    pub cmena: CmenaConfig,
    pub rmde: RmdeConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            solver: FitSolver::Cmen,
            m: 20,
            basis_seed: 0,
            basis_from: None,
            domain_margin: 0.1,
            grid: None,
            standardize: false,
            pca_dim: None,
            eta: None,
            newton: NewtonConfig::default(),
            cmena: CmenaConfig::default(),
            rmde: RmdeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifyConfig {
    pub pipeline: PipelineConfig,
    pub folds: usize,
    pub seed: u64,
    /// Also export `exp(-gamma D)` of the training distances.
    pub gamma: Option<f64>,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        ClassifyConfig {
            pipeline: PipelineConfig::default(),
            folds: 10,
            seed: 0,
            gamma: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundCheckConfig {
    #[serde(rename = "N")]
    pub n_bags: usize,
    pub m: usize,
    pub n_per_bag: usize,
    pub trials: usize,
    pub a_values: Vec<f64>,
    pub seed: u64,
}

impl Default for BoundCheckConfig {
    fn default() -> Self {
        BoundCheckConfig {
            n_bags: 5,
            m: 10,
            n_per_bag: 200,
            trials: 200,
            a_values: vec![2.0, 5.0],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Unlabeled bags from a random low-rank parameter matrix.
    Lowrank,
    /// The labeled two-class fixture.
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub kind: SynthKind,
    #[serde(rename = "N")]
    pub n_bags: usize,
    pub m: usize,
    #[serde(rename = "T")]
    pub rank: usize,
    pub n_per_bag: usize,
    pub half_width: f64,
    pub points_per_axis: usize,
    /// Entry scale of the low-rank factors; `1/√m` when absent.
    pub scale: Option<f64>,
    pub seed: u64,
    pub classification: ClassificationFixture,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            kind: SynthKind::Lowrank,
            n_bags: 20,
            m: 20,
            rank: 2,
            n_per_bag: 1000,
            half_width: 3.0,
            points_per_axis: 64,
            scale: None,
            seed: 0,
            classification: ClassificationFixture::default(),
        }
    }
}

/// Splits `"1,2,3"` into values.
pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|e| anyhow::anyhow!("bad list entry {p:?}: {e}"))
        })
        .collect()
}

pub fn check_threads(n: usize) -> Result<usize> {
    if n == 0 {
        bail!("thread count must be positive");
    }
    Ok(n)
}
