//! Synthetic ground truth and the numerical experiments built on it:
//! low-rank parameter matrices, rejection sampling, rank-recovery phase
//! diagrams, the Markov-bound check and runtime scaling.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, Domain, FeatureGrid, FeatureMap, IntegrationGrid};
use crate::error::{invalid, Error, Result};
use crate::lowrank;
use crate::maxent::{self, MEDensity, NewtonConfig, SufficientStats};
use crate::mil::{self, LabeledBag, LabeledBagDataset};
use crate::rng::{self, derive_seed};
use crate::solvers::{self, CmenaConfig, LambdaMatrix, RmdeConfig};

pub(crate) fn synthetic_bag_id(i: usize) -> String {
    format!("bag{i:04}")
}

/// `Λ = A B` with `A: m × T`, `B: T × N`, entries i.i.d. `N(0, scale²)`;
/// `scale` defaults to `1/√m`.
pub fn synth_lowrank_lambda(
    m: usize,
    n_bags: usize,
    t: usize,
    seed: u64,
    scale: Option<f64>,
) -> Result<LambdaMatrix> {
    if t == 0 || t > m.min(n_bags) {
        return invalid(format!("rank {t} must lie in 1..={}", m.min(n_bags)));
    }
    let scale = scale.unwrap_or(1.0 / (m as f64).sqrt());
    if !(scale > 0.0) || !scale.is_finite() {
        return invalid(format!("scale must be positive, got {scale}"));
    }
    let mut r = rng::seeded(seed);
    let mut draw = |rows, cols| {
        DMatrix::from_fn(rows, cols, |_, _| {
            scale * r.sample::<f64, _>(StandardNormal)
        })
    };
    let a = draw(m, t);
    let b = draw(t, n_bags);
    LambdaMatrix::new(a * b, (0..n_bags).map(synthetic_bag_id).collect())
}

/// Draws and the proposal statistics of [`rejection_sample`].
#[derive(Debug, Clone)]
pub struct Sample {
    /// `n × d`
    pub instances: DMatrix<f64>,
    pub acceptance_rate: f64,
    /// Proposals whose density exceeded the envelope (accepted anyway).
    pub envelope_exceeded: usize,
}

const PROBE_BATCH: usize = 10_000;
const MIN_ACCEPTANCE: f64 = 1e-4;
const ENVELOPE: f64 = 1.1;

/// Rejection sampling from `p_λ` with a uniform proposal over the domain
/// box and envelope `1.1 · max_q exp(λᵀφ(x_q))` over the grid nodes.
pub fn rejection_sample<F: FeatureMap + ?Sized>(
    density: &MEDensity,
    map: &F,
    fg: &FeatureGrid,
    n: usize,
    seed: u64,
) -> Result<Sample> {
    if density.m() != map.num_features() || fg.num_features() != map.num_features() {
        return invalid("density, feature map and grid disagree on m");
    }
    let domain = fg.domain();
    let d = domain.dim();
    if map.input_dim() != d {
        return invalid("feature map and grid disagree on the dimension");
    }
    let log_env = (fg.phi() * &density.lambda).max() + ENVELOPE.ln();
    let mut r = rng::seeded(seed);
    let mut out = DMatrix::zeros(n, d);
    let mut x = vec![0.0; d];
    let mut phi = vec![0.0; map.num_features()];
    let (mut accepted, mut proposed, mut exceeded) = (0, 0usize, 0);
    while accepted < n {
        for j in 0..d {
            let u: f64 = r.random();
            x[j] = domain.lo()[j] + u * domain.width(j);
        }
        map.eval_into(&x, &mut phi);
        let s: f64 = phi
            .iter()
            .zip(density.lambda.iter())
            .map(|(a, b)| a * b)
            .sum();
        let u: f64 = r.random();
        proposed += 1;
        if s > log_env {
            exceeded += 1;
        }
        if u.ln() < s - log_env {
            for j in 0..d {
                out[(accepted, j)] = x[j];
            }
            accepted += 1;
        }
        if proposed == PROBE_BATCH && (accepted as f64) < MIN_ACCEPTANCE * PROBE_BATCH as f64 {
            return Err(Error::DegenerateDensity(format!(
                "bag {}: {accepted} of {PROBE_BATCH} probe proposals accepted",
                density.bag_id
            )));
        }
    }
    Ok(Sample {
        instances: out,
        acceptance_rate: if proposed == 0 {
            1.0
        } else {
            n as f64 / proposed as f64
        },
        envelope_exceeded: exceeded,
    })
}

/// Smallest singular value counted as nonzero, relative to the largest.
fn smallest_nonzero_singular_value(x: &DMatrix<f64>) -> Result<Option<f64>> {
    let s = lowrank::svd(x)?.s;
    let Some(&top) = s.iter().next() else {
        return Ok(None);
    };
    let tol = top * f64::EPSILON * x.nrows().max(x.ncols()) as f64;
    Ok(s.iter().copied().filter(|&v| v > tol).last())
}

/// `mean - 3 std` (population) of the ensemble's smallest nonzero singular
/// values, floored at `1e-12`.
pub fn recovery_threshold(true_lambdas: &[LambdaMatrix]) -> Result<f64> {
    if true_lambdas.is_empty() {
        return invalid("empty ensemble");
    }
    let mut vals = Vec::with_capacity(true_lambdas.len());
    for l in true_lambdas {
        if let Some(v) = smallest_nonzero_singular_value(&l.data)? {
            vals.push(v);
        }
    }
    Ok(threshold_from_values(&vals))
}

pub(crate) fn threshold_from_values(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        return 1e-12;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean - 3.0 * var.sqrt()).max(1e-12)
}

/// Joint solver used in a phase-diagram cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseSolver {
    Cmen,
    RmdeContinuation,
    RmdeCv,
}

impl PhaseSolver {
    pub fn name(self) -> &'static str {
        match self {
            PhaseSolver::Cmen => "cmen",
            PhaseSolver::RmdeContinuation => "rmde-continuation",
            PhaseSolver::RmdeCv => "rmde-cv",
        }
    }
}

/// Grid of `(m, T)` cells over which exact rank recovery is estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseDiagramSpec {
    #[serde(rename = "N")]
    pub n_bags: usize,
    pub m_values: Vec<usize>,
    #[serde(rename = "T_values")]
    pub t_values: Vec<usize>,
    pub n_per_bag: usize,
    pub reps: usize,
    pub base_seed: u64,
    pub solver: PhaseSolver,
    /// Instances live in `[-half_width, half_width]²`.
    pub half_width: f64,
    pub points_per_axis: usize,
    pub newton: NewtonConfig,
    pub cmena: CmenaConfig,
    pub rmde: RmdeConfig,
    pub cv_etas: Vec<f64>,
}

impl Default for PhaseDiagramSpec {
    fn default() -> Self {
        PhaseDiagramSpec {
            n_bags: 20,
            m_values: vec![20, 30, 40],
            t_values: vec![2, 5, 10],
            n_per_bag: 1000,
            reps: 10,
            base_seed: 0,
            solver: PhaseSolver::Cmen,
            half_width: 3.0,
            points_per_axis: 64,
            newton: NewtonConfig::default(),
            cmena: CmenaConfig::default(),
            rmde: RmdeConfig::default(),
            cv_etas: (-4..=4).map(|e| 10f64.powi(e)).collect(),
        }
    }
}

impl PhaseDiagramSpec {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 || self.n_per_bag == 0 || self.n_bags == 0 {
            return invalid("reps, n_per_bag and N must be positive");
        }
        if self.m_values.is_empty() || self.t_values.is_empty() {
            return invalid("m_values and T_values must be nonempty");
        }
        for &m in &self.m_values {
            if m == 0 || m % 2 != 0 {
                return invalid(format!("m = {m} must be positive and even"));
            }
            for &t in &self.t_values {
                if t == 0 || t >= m || t > self.n_bags {
                    return invalid(format!("T = {t} must satisfy 1 <= T < m = {m} and T <= N"));
                }
            }
        }
        if !(self.half_width > 0.0) || self.points_per_axis < 2 {
            return invalid("half_width must be positive and points_per_axis at least 2");
        }
        if self.solver == PhaseSolver::RmdeCv && self.cv_etas.is_empty() {
            return invalid("cv_etas must be nonempty");
        }
        self.newton.validate()?;
        self.cmena.validate()?;
        self.rmde.validate()
    }
}

/// Recovery statistics of one `(m, T)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseCell {
    pub m: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub solver: PhaseSolver,
    pub recovery_probability: f64,
    /// Recovered rank per repetition; `None` when the repetition failed.
    pub ranks: Vec<Option<usize>>,
    pub threshold: f64,
    /// Solver warnings and per-repetition failures.
    pub warnings: Vec<String>,
}

/// Synthetic bags drawn from the columns of a ground-truth `Λ`.
pub struct SyntheticBags {
    pub basis: BasisSpec,
    pub fg: FeatureGrid,
    pub truth: LambdaMatrix,
    pub bags: Vec<DMatrix<f64>>,
    pub stats: Vec<SufficientStats>,
}

/// Samples `n` instances per column of `truth` and summarizes each bag.
pub fn sample_bags(
    truth: &LambdaMatrix,
    basis: &BasisSpec,
    fg: &FeatureGrid,
    n: usize,
    seed: u64,
) -> Result<(Vec<DMatrix<f64>>, Vec<SufficientStats>)> {
    let densities = truth.densities(fg)?;
    let mut bags = Vec::with_capacity(densities.len());
    let mut stats = Vec::with_capacity(densities.len());
    for (i, p) in densities.iter().enumerate() {
        let s = rejection_sample(p, basis, fg, n, derive_seed(seed, &[i as u64]))?;
        stats.push(SufficientStats::from_instances(
            &s.instances,
            basis,
            p.bag_id.clone(),
        )?);
        bags.push(s.instances);
    }
    Ok((bags, stats))
}

/// Basis, grid and sampled bags for a given ground truth, on
/// `[-half_width, half_width]^d`.
pub fn synth_bags(
    truth: LambdaMatrix,
    d: usize,
    half_width: f64,
    points_per_axis: usize,
    n: usize,
    seed: u64,
) -> Result<SyntheticBags> {
    let basis = BasisSpec::new(d, truth.m(), derive_seed(seed, &[1]))?;
    let domain = Domain::cube(d, half_width)?;
    let grid = IntegrationGrid::tensor(&domain, points_per_axis)?;
    let fg = FeatureGrid::new(&basis, &grid)?;
    let (bags, stats) = sample_bags(&truth, &basis, &fg, n, derive_seed(seed, &[2]))?;
    Ok(SyntheticBags {
        basis,
        fg,
        truth,
        bags,
        stats,
    })
}

fn cell_truth(spec: &PhaseDiagramSpec, m: usize, t: usize, rep: usize) -> Result<LambdaMatrix> {
    let seed = derive_seed(spec.base_seed, &[m as u64, t as u64, rep as u64, 0]);
    synth_lowrank_lambda(m, spec.n_bags, t, seed, None)
}

/// Recovered rank of every requested solver for one repetition.
fn run_rep(
    spec: &PhaseDiagramSpec,
    truth: LambdaMatrix,
    m: usize,
    t: usize,
    rep: usize,
    threshold: f64,
    solvers_wanted: &[PhaseSolver],
) -> Vec<(Option<usize>, Option<String>)> {
    let fail = |e: Error| {
        let msg = format!("rep {rep}: {e}");
        solvers_wanted
            .iter()
            .map(|_| (None, Some(msg.clone())))
            .collect()
    };
    let seed = derive_seed(spec.base_seed, &[m as u64, t as u64, rep as u64, 1]);
    let data = match synth_bags(
        truth,
        2,
        spec.half_width,
        spec.points_per_axis,
        spec.n_per_bag,
        seed,
    ) {
        Ok(d) => d,
        Err(e) => return fail(e),
    };
    let lambda_hat = match solvers::fit_mde(&data.stats, &data.fg, &spec.newton) {
        Ok(l) => l,
        Err(e) => return fail(e),
    };
    solvers_wanted
        .iter()
        .map(|&solver| {
            let fitted = match solver {
                PhaseSolver::Cmen => {
                    solvers::fit_cmen_from(&lambda_hat, &data.stats, &data.fg, &spec.cmena)
                }
                PhaseSolver::RmdeContinuation => {
                    solvers::rmde_continuation_from(&lambda_hat, &data.stats, &data.fg, &spec.rmde)
                }
                PhaseSolver::RmdeCv => solvers::rmde_cross_validate(
                    &data.stats,
                    &data.fg,
                    &spec.cv_etas,
                    derive_seed(seed, &[3]),
                    &spec.newton,
                    &spec.rmde,
                )
                .map(|cv| (cv.lambda, cv.report)),
            };
            match fitted {
                Ok((lambda, report)) => match lowrank::numeric_rank(&lambda.data, threshold) {
                    Ok(rank) => (
                        Some(rank),
                        report
                            .warning
                            .map(|w| format!("rep {rep} {}: {w}", solver.name())),
                    ),
                    Err(e) => (None, Some(format!("rep {rep}: {e}"))),
                },
                Err(e) => (None, Some(format!("rep {rep} {}: {e}", solver.name()))),
            }
        })
        .collect()
}

/// Runs one `(m, T)` cell for several solvers on shared synthetic data.
/// Repetitions derive their streams from `(base_seed, m, T, rep)`, so the
/// result does not depend on scheduling or on which other cells run.
pub fn run_phase_cell(
    spec: &PhaseDiagramSpec,
    m: usize,
    t: usize,
    solvers_wanted: &[PhaseSolver],
) -> Result<Vec<PhaseCell>> {
    spec.validate()?;
    if solvers_wanted.is_empty() {
        return invalid("no solvers requested");
    }
    let truths: Vec<LambdaMatrix> = (0..spec.reps)
        .map(|rep| cell_truth(spec, m, t, rep))
        .collect::<Result<_>>()?;
    let threshold = recovery_threshold(&truths)?;
    let per_rep: Vec<Vec<(Option<usize>, Option<String>)>> = truths
        .into_par_iter()
        .enumerate()
        .map(|(rep, truth)| run_rep(spec, truth, m, t, rep, threshold, solvers_wanted))
        .collect();
    Ok(solvers_wanted
        .iter()
        .enumerate()
        .map(|(k, &solver)| {
            let ranks: Vec<Option<usize>> = per_rep.iter().map(|r| r[k].0).collect();
            let warnings: Vec<String> = per_rep.iter().filter_map(|r| r[k].1.clone()).collect();
            let hits = ranks.iter().filter(|&&r| r == Some(t)).count();
            PhaseCell {
                m,
                t,
                solver,
                recovery_probability: hits as f64 / spec.reps as f64,
                ranks,
                threshold,
                warnings,
            }
        })
        .collect())
}

/// All cells of the diagram for `spec.solver`, row-major over
/// `(m_values, T_values)`.
pub fn run_phase_diagram(spec: &PhaseDiagramSpec) -> Result<Vec<PhaseCell>> {
    spec.validate()?;
    let mut cells = Vec::with_capacity(spec.m_values.len() * spec.t_values.len());
    for &m in &spec.m_values {
        for &t in &spec.t_values {
            cells.extend(run_phase_cell(spec, m, t, &[spec.solver])?);
        }
    }
    Ok(cells)
}

/// Exceedance frequencies of `Σ n_i D(p_λ̂ᵢ‖p_λᵢ) ≥ a N m / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub a_values: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub exceedance: Vec<f64>,
    /// KL sum of every completed trial.
    pub kl_sums: Vec<f64>,
    /// Trials skipped because a fit or the sampler failed.
    pub failed_trials: usize,
}

/// Monte Carlo check of the confidence bound: each trial draws a full-rank
/// `Λ` (scale `1/√m`), samples `n` instances per bag in 2-D, fits `Λ̂` and
/// records the KL sum.
pub fn markov_bound_trial(
    n_bags: usize,
    m: usize,
    n: usize,
    trials: usize,
    a_values: &[f64],
    seed: u64,
) -> Result<BoundCheck> {
    if trials < 50 {
        return invalid(format!("at least 50 trials are needed, got {trials}"));
    }
    if a_values.is_empty() || a_values.iter().any(|&a| !(a > 0.0)) {
        return invalid("a_values must be nonempty and positive");
    }
    let newton = NewtonConfig::default();
    let rank = m.min(n_bags);
    let results: Vec<Result<f64>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let tseed = derive_seed(seed, &[trial as u64]);
            let truth = synth_lowrank_lambda(m, n_bags, rank, derive_seed(tseed, &[0]), None)?;
            let data = synth_bags(truth, 2, 3.0, 64, n, tseed)?;
            let hat = solvers::fit_mde(&data.stats, &data.fg, &newton)?;
            let p_hat = hat.densities(&data.fg)?;
            let p_true = data.truth.densities(&data.fg)?;
            let mut sum = 0.0;
            for ((ph, pt), s) in p_hat.iter().zip(&p_true).zip(&data.stats) {
                sum += s.n as f64 * maxent::kl(ph, pt)?;
            }
            Ok(sum)
        })
        .collect();
    let mut kl_sums = Vec::with_capacity(trials);
    let mut failed = 0;
    for r in results {
        match r {
            Ok(v) => kl_sums.push(v),
            Err(e) => {
                log::warn!("bound-check trial failed: {e}");
                failed += 1;
            }
        }
    }
    if kl_sums.is_empty() {
        return Err(Error::Internal("every bound-check trial failed".into()));
    }
    let epsilons: Vec<f64> = a_values
        .iter()
        .map(|&a| solvers::epsilon_bound(n_bags, m, a))
        .collect::<Result<_>>()?;
    let exceedance = epsilons
        .iter()
        .map(|&eps| kl_sums.iter().filter(|&&v| v >= eps).count() as f64 / kl_sums.len() as f64)
        .collect();
    Ok(BoundCheck {
        a_values: a_values.to_vec(),
        epsilons,
        exceedance,
        kl_sums,
        failed_trials: failed,
    })
}

/// Timings at one bag size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    /// Seconds to summarize all bags.
    pub suff_stats: f64,
    /// Seconds for the pairwise symmetric-KL matrix of the fitted densities.
    pub kl_matrix: f64,
    /// Seconds for one average-Hausdorff distance between two bags.
    pub hausdorff: f64,
}

/// Settings of [`runtime_benchmark`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSpec {
    pub sizes: Vec<usize>,
    pub d: usize,
    pub m: usize,
    pub n_bags: usize,
    pub seed: u64,
    /// Each timing repeats its operation for at least this long and keeps
    /// the median of five such measurements.
    pub min_seconds: f64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            sizes: vec![500, 1000, 2000],
            d: 2,
            m: 20,
            n_bags: 20,
            seed: 0,
            min_seconds: 0.02,
        }
    }
}

/// Median over five batches of the per-call time of `f`.
fn time_per_call(min_seconds: f64, mut f: impl FnMut()) -> f64 {
    let mut samples = Vec::with_capacity(5);
    for _ in 0..5 {
        let start = Instant::now();
        let mut calls = 0u32;
        loop {
            f();
            calls += 1;
            let el = start.elapsed().as_secs_f64();
            if el >= min_seconds {
                samples.push(el / calls as f64);
                break;
            }
        }
    }
    samples.sort_by(f64::total_cmp);
    samples[2]
}

/// Measures how summarization, KL-matrix and average-Hausdorff costs grow
/// with the number of instances per bag, on uniform random bags.
pub fn runtime_benchmark(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    if spec.sizes.is_empty() || spec.sizes.contains(&0) || spec.n_bags < 2 {
        return invalid("benchmark needs positive sizes and at least two bags");
    }
    let basis = BasisSpec::new(spec.d, spec.m, derive_seed(spec.seed, &[0]))?;
    let domain = Domain::cube(spec.d, 3.0)?;
    let grid = IntegrationGrid::default_for(&domain, derive_seed(spec.seed, &[1]))?;
    let fg = FeatureGrid::new(&basis, &grid)?;
    let newton = NewtonConfig::default();
    let mut rows = Vec::with_capacity(spec.sizes.len());
    for &n in &spec.sizes {
        let mut r = rng::seeded(derive_seed(spec.seed, &[2, n as u64]));
        let bags: Vec<DMatrix<f64>> = (0..spec.n_bags)
            .map(|_| DMatrix::from_fn(n, spec.d, |_, _| r.random_range(-3.0..3.0)))
            .collect();
        let summarize = || -> Result<Vec<SufficientStats>> {
            bags.iter()
                .enumerate()
                .map(|(i, b)| SufficientStats::from_instances(b, &basis, synthetic_bag_id(i)))
                .collect()
        };
        let stats = summarize()?;
        let suff_stats = time_per_call(spec.min_seconds, || {
            std::hint::black_box(summarize().ok());
        });
        let densities = solvers::fit_mde(&stats, &fg, &newton)?.densities(&fg)?;
        let kl_matrix = time_per_call(spec.min_seconds, || {
            std::hint::black_box(mil::sym_kl_matrix(&densities).ok());
        });
        let hausdorff = time_per_call(spec.min_seconds, || {
            std::hint::black_box(mil::avg_hausdorff(&bags[0], &bags[1]).ok());
        });
        rows.push(BenchRow {
            n,
            suff_stats,
            kl_matrix,
            hausdorff,
        });
    }
    Ok(rows)
}

/// Two-class bag data set: class `c` has parameters
/// `λ_i = μ_c + b_i w_c + b'_i w'_c` (rank 2 around a class center), and
/// every bag holds `n` instances sampled on `[-3, 3]²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassificationFixture {
    pub n_bags: usize,
    pub n_per_bag: usize,
    pub m: usize,
    pub seed: u64,
    /// Standard deviation of the class-center entries.
    pub center_scale: f64,
    /// Standard deviation of the within-class coefficients.
    pub spread: f64,
}

impl Default for ClassificationFixture {
    fn default() -> Self {
        ClassificationFixture {
            n_bags: 40,
            n_per_bag: 500,
            m: 20,
            seed: 0,
            center_scale: 0.5,
            spread: 0.3,
        }
    }
}

pub fn synth_classification(fix: &ClassificationFixture) -> Result<LabeledBagDataset> {
    if fix.n_bags < 2 || fix.n_per_bag == 0 || fix.m == 0 || fix.m % 2 != 0 {
        return invalid("fixture needs at least 2 bags, positive n and even m");
    }
    let m = fix.m;
    let mut r = rng::seeded(derive_seed(fix.seed, &[0]));
    let mut normal = |s: f64| -> DVector<f64> {
        DVector::from_fn(m, |_, _| s * r.sample::<f64, _>(StandardNormal))
    };
    let unit = 1.0 / (m as f64).sqrt();
    let classes: Vec<(DVector<f64>, DVector<f64>, DVector<f64>)> = (0..2)
        .map(|_| (normal(fix.center_scale), normal(unit), normal(unit)))
        .collect();
    let mut cols = Vec::with_capacity(fix.n_bags);
    let mut labels = Vec::with_capacity(fix.n_bags);
    let mut r = rng::seeded(derive_seed(fix.seed, &[1]));
    for i in 0..fix.n_bags {
        let c = i % 2;
        let (mu, w1, w2) = &classes[c];
        let b1: f64 = fix.spread * r.sample::<f64, _>(StandardNormal) * (m as f64).sqrt();
        let b2: f64 = fix.spread * r.sample::<f64, _>(StandardNormal) * (m as f64).sqrt();
        cols.push(mu + w1 * b1 + w2 * b2);
        labels.push(format!("class{c}"));
    }
    let truth = LambdaMatrix::new(
        DMatrix::from_columns(&cols),
        (0..fix.n_bags).map(synthetic_bag_id).collect(),
    )?;
    let data = synth_bags(
        truth,
        2,
        3.0,
        64,
        fix.n_per_bag,
        derive_seed(fix.seed, &[2]),
    )?;
    let bags = data
        .bags
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (instances, label))| LabeledBag {
            bag_id: synthetic_bag_id(i),
            label: Some(label),
            instances,
        })
        .collect();
    LabeledBagDataset::new(bags)
}
