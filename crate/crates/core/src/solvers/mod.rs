//! Joint estimation over all bags.
//!
//! The bags' parameter vectors form the columns of `Λ` (`m × N`). Plain MDE
//! fits each column independently; RMDE adds `η‖Λ‖_*`; CMEN minimizes `‖Λ‖_*`
//! subject to `Σ n_i D(p_λ̂ᵢ‖p_λᵢ) ≤ ε`. Both penalized solvers are proximal
//! gradient methods sharing [`SmoothLoss`] and [`line_search`].

mod cmena;
mod rmde;

pub use cmena::{fit_cmen, fit_cmen_from, CmenaConfig, CmenaInit};
pub use rmde::{
    continuation_schedule, fit_rmde, rmde_continuation, rmde_continuation_from,
    rmde_cross_validate, CrossValidation, RmdeConfig,
};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{FeatureGrid, FeatureMap};
use crate::error::{invalid, Error, Result};
use crate::lowrank::{self, Shrunk};
use crate::maxent::{self, MEDensity, NewtonConfig, SufficientStats};

/// Joint parameter matrix; column `i` is `λ_i` of bag `bag_ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaMatrix {
    pub data: DMatrix<f64>,
    pub bag_ids: Vec<String>,
}

impl LambdaMatrix {
    pub fn new(data: DMatrix<f64>, bag_ids: Vec<String>) -> Result<Self> {
        if data.ncols() != bag_ids.len() {
            return invalid(format!(
                "{} columns but {} bag ids",
                data.ncols(),
                bag_ids.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return invalid("parameter matrix contains non-finite entries");
        }
        Ok(LambdaMatrix { data, bag_ids })
    }

    pub fn from_densities(densities: &[MEDensity]) -> Result<Self> {
        let Some(first) = densities.first() else {
            return invalid("no densities");
        };
        let m = first.m();
        if densities.iter().any(|d| d.m() != m) {
            return invalid("densities have different parameter lengths");
        }
        let cols: Vec<DVector<f64>> = densities.iter().map(|d| d.lambda.clone()).collect();
        let ids = densities.iter().map(|d| d.bag_id.clone()).collect();
        LambdaMatrix::new(DMatrix::from_columns(&cols), ids)
    }

    pub fn m(&self) -> usize {
        self.data.nrows()
    }

    pub fn num_bags(&self) -> usize {
        self.data.ncols()
    }

    pub fn column(&self, i: usize) -> DVector<f64> {
        self.data.column(i).into_owned()
    }

    /// Densities of every column, with log-partitions and means evaluated
    /// in one pass over the grid.
    pub fn densities(&self, fg: &FeatureGrid) -> Result<Vec<MEDensity>> {
        if self.m() != fg.num_features() {
            return invalid(format!(
                "parameter matrix has {} rows, features have {}",
                self.m(),
                fg.num_features()
            ));
        }
        let (zs, means) = maxent::log_partitions_and_means(&self.data, fg);
        Ok(self
            .bag_ids
            .iter()
            .enumerate()
            .map(|(i, id)| MEDensity {
                bag_id: id.clone(),
                lambda: self.column(i),
                log_z: zs[i],
                mean_phi: means.column(i).into_owned(),
                basis_fingerprint: fg.fingerprint(),
            })
            .collect())
    }
}

#[derive(Serialize, Deserialize)]
struct LambdaRepr {
    bag_ids: Vec<String>,
    columns: Vec<Vec<f64>>,
}

impl Serialize for LambdaMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        LambdaRepr {
            bag_ids: self.bag_ids.clone(),
            columns: self
                .data
                .column_iter()
                .map(|c| c.iter().copied().collect())
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for LambdaMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let r = LambdaRepr::deserialize(de)?;
        let m = r.columns.first().map_or(0, Vec::len);
        if r.columns.iter().any(|c| c.len() != m) {
            return Err(D::Error::custom("columns have different lengths"));
        }
        let flat: Vec<f64> = r.columns.into_iter().flatten().collect();
        let data = DMatrix::from_column_slice(m, r.bag_ids.len(), &flat);
        LambdaMatrix::new(data, r.bag_ids).map_err(D::Error::custom)
    }
}

/// Iteration traces and diagnostics of a joint fit.
///
/// The per-iterate vectors are aligned: one entry per outer CMENA iteration,
/// or per η stage for RMDE.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub solver: String,
    /// `‖Λ‖_*` of each iterate.
    pub objective_trace: Vec<f64>,
    /// `g(Λ) - ε` for CMEN, the smooth loss `F(Λ)` for RMDE.
    pub constraint_trace: Vec<f64>,
    pub rank_trace: Vec<usize>,
    /// Dual variable per outer iteration (CMEN only).
    pub z_trace: Vec<f64>,
    /// Regularization weight per stage (RMDE only).
    pub eta_trace: Vec<f64>,
    pub inner_iters: Vec<usize>,
    pub epsilon: Option<f64>,
    /// Step bound used by the line search, `m · max n_i`.
    pub tau_lipschitz: f64,
    /// The unweighted `N m` bound, for comparison.
    pub tau_paper: f64,
    /// Accepted steps whose majorization test failed even at the bound.
    pub majorization_violations: usize,
    /// Smooth-loss evaluations spent in line searches.
    pub line_search_evaluations: usize,
    pub converged: bool,
    pub warning: Option<String>,
    pub wall_time: f64,
}

impl FitReport {
    fn new(solver: &str, n_bags: usize, m: usize, tau_lipschitz: f64) -> Self {
        FitReport {
            solver: solver.to_string(),
            tau_lipschitz,
            tau_paper: (n_bags * m) as f64,
            ..Default::default()
        }
    }

    fn push(&mut self, nuclear: f64, constraint: f64, rank: usize, inner: usize) {
        self.objective_trace.push(nuclear);
        self.constraint_trace.push(constraint);
        self.rank_trace.push(rank);
        self.inner_iters.push(inner);
    }
}

fn check_stats_list(stats: &[SufficientStats], fg: &FeatureGrid) -> Result<()> {
    if stats.is_empty() {
        return invalid("no bags");
    }
    let m = fg.num_features();
    if let Some(s) = stats.iter().find(|s| s.m() != m) {
        return invalid(format!(
            "bag {} has {} feature means, features have {m}",
            s.bag_id,
            s.m()
        ));
    }
    Ok(())
}

fn bag_ids(stats: &[SufficientStats]) -> Vec<String> {
    stats.iter().map(|s| s.bag_id.clone()).collect()
}

/// Column-wise maximum-likelihood fit `Λ̂`. Bags are fitted in parallel;
/// every failing bag is named in the error.
pub fn fit_mde(
    stats: &[SufficientStats],
    fg: &FeatureGrid,
    cfg: &NewtonConfig,
) -> Result<LambdaMatrix> {
    check_stats_list(stats, fg)?;
    cfg.validate()?;
    let fits: Vec<Result<MEDensity>> = stats
        .par_iter()
        .map(|s| maxent::fit_sde(s, fg, cfg))
        .collect();
    let failed: Vec<String> = fits
        .iter()
        .zip(stats)
        .filter(|(f, _)| f.is_err())
        .map(|(_, s)| s.bag_id.clone())
        .collect();
    if !failed.is_empty() {
        for (f, s) in fits.iter().zip(stats) {
            if let Err(e) = f {
                log::warn!("bag {}: {e}", s.bag_id);
            }
        }
        return Err(Error::BagsFailed(failed));
    }
    let densities: Vec<MEDensity> = fits.into_iter().map(|f| f.unwrap()).collect();
    LambdaMatrix::from_densities(&densities)
}

/// A differentiable loss on `m × N` matrices.
pub trait SmoothLoss {
    fn value(&self, x: &DMatrix<f64>) -> f64;
    fn value_and_grad(&self, x: &DMatrix<f64>) -> (f64, DMatrix<f64>);
}

/// `Σ_i n_i (Z(λ_i) - λ_iᵀ t_i) + c`.
///
/// With `t_i = φ̄_i` and `c = 0` this is the joint negative log-likelihood
/// `F`; with `t_i = E_λ̂ᵢ[φ]` and `c = Σ n_i (λ̂_iᵀ t_i - Z(λ̂_i))` it is the
/// KL sum `g`.
pub(crate) struct PartitionLoss<'a> {
    fg: &'a FeatureGrid,
    weights: DVector<f64>,
    targets: DMatrix<f64>,
    constant: f64,
}

impl<'a> PartitionLoss<'a> {
    pub(crate) fn likelihood(stats: &[SufficientStats], fg: &'a FeatureGrid) -> Self {
        let cols: Vec<DVector<f64>> = stats.iter().map(|s| s.phi_bar.clone()).collect();
        PartitionLoss {
            fg,
            weights: DVector::from_iterator(stats.len(), stats.iter().map(|s| s.n as f64)),
            targets: DMatrix::from_columns(&cols),
            constant: 0.0,
        }
    }

    pub(crate) fn kl_sum(
        stats: &[SufficientStats],
        lambda_hat: &DMatrix<f64>,
        fg: &'a FeatureGrid,
    ) -> Self {
        let (zs, means) = maxent::log_partitions_and_means(lambda_hat, fg);
        let weights = DVector::from_iterator(stats.len(), stats.iter().map(|s| s.n as f64));
        let constant = (0..stats.len())
            .map(|i| weights[i] * (lambda_hat.column(i).dot(&means.column(i)) - zs[i]))
            .sum();
        PartitionLoss {
            fg,
            weights,
            targets: means,
            constant,
        }
    }

    fn linear_term(&self, x: &DMatrix<f64>) -> f64 {
        (0..x.ncols())
            .map(|i| self.weights[i] * x.column(i).dot(&self.targets.column(i)))
            .sum()
    }
}

impl SmoothLoss for PartitionLoss<'_> {
    fn value(&self, x: &DMatrix<f64>) -> f64 {
        let zs = maxent::log_partitions(x, self.fg);
        let zsum: f64 = zs.iter().zip(self.weights.iter()).map(|(z, w)| z * w).sum();
        zsum - self.linear_term(x) + self.constant
    }

    fn value_and_grad(&self, x: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let (zs, means) = maxent::log_partitions_and_means(x, self.fg);
        let zsum: f64 = zs.iter().zip(self.weights.iter()).map(|(z, w)| z * w).sum();
        let mut grad = means - &self.targets;
        for (i, mut col) in grad.column_iter_mut().enumerate() {
            col *= self.weights[i];
        }
        (zsum - self.linear_term(x) + self.constant, grad)
    }
}

fn check_same_shape(a: &LambdaMatrix, b: &LambdaMatrix, stats: &[SufficientStats]) -> Result<()> {
    if a.data.shape() != b.data.shape() || a.num_bags() != stats.len() {
        return invalid(format!(
            "shape mismatch: {:?} vs {:?} with {} bags",
            a.data.shape(),
            b.data.shape(),
            stats.len()
        ));
    }
    Ok(())
}

/// `g(Λ) = Σ n_i D(p_λ̂ᵢ‖p_λᵢ)` and its gradient, column `i` equal to
/// `n_i (E_λᵢ[φ] - E_λ̂ᵢ[φ])`.
pub fn g_and_grad(
    lambda: &LambdaMatrix,
    lambda_hat: &LambdaMatrix,
    stats: &[SufficientStats],
    fg: &FeatureGrid,
) -> Result<(f64, DMatrix<f64>)> {
    check_stats_list(stats, fg)?;
    check_same_shape(lambda, lambda_hat, stats)?;
    if lambda.m() != fg.num_features() {
        return invalid("parameter rows do not match the feature count");
    }
    let loss = PartitionLoss::kl_sum(stats, &lambda_hat.data, fg);
    let (g, grad) = loss.value_and_grad(&lambda.data);
    Ok((g.max(0.0), grad))
}

/// Confidence radius `a N m / 2`.
pub fn epsilon_bound(n_bags: usize, m: usize, a: f64) -> Result<f64> {
    if n_bags == 0 || m == 0 || !(a > 0.0) {
        return invalid("epsilon_bound needs positive N, m and a");
    }
    Ok(a * (n_bags * m) as f64 / 2.0)
}

/// Gradient Lipschitz bound `m · max_i n_i`: block `i` of the Hessian is
/// `n_i Cov[φ] ⪯ n_i m I` because every feature lies in `[-1, 1]`.
pub fn lipschitz_tau(stats: &[SufficientStats], m: usize) -> Result<f64> {
    let Some(max_n) = stats.iter().map(|s| s.n).max() else {
        return invalid("no bags");
    };
    Ok((m * max_n) as f64)
}

/// `D_{1/(τz)}(Λ₀ - ∇/τ)`.
pub fn prox_step(
    lambda0: &LambdaMatrix,
    z: f64,
    tau: f64,
    grad: &DMatrix<f64>,
) -> Result<LambdaMatrix> {
    if !(z > 0.0) || !(tau > 0.0) {
        return invalid("z and tau must be positive");
    }
    if grad.shape() != lambda0.data.shape() {
        return invalid("gradient shape does not match the parameter matrix");
    }
    let shrunk = lowrank::shrink(&(&lambda0.data - grad / tau), 1.0 / (tau * z))?;
    LambdaMatrix::new(shrunk.matrix, lambda0.bag_ids.clone())
}

/// Backtracking settings shared by both proximal solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchConfig {
    /// Shrink factor `α ∈ (0, 1)`.
    pub alpha: f64,
    /// Smallest step bound tried, as a fraction of `tau_max`.
    pub floor: f64,
}

/// Accepted step of [`line_search`].
#[derive(Debug, Clone)]
pub struct LineSearchOutcome {
    pub tau: f64,
    pub candidate: Shrunk,
    /// Smooth loss at the candidate.
    pub value: f64,
    /// Whether the accepted candidate satisfies the quadratic majorization.
    pub majorized: bool,
    pub evaluations: usize,
}

struct Trial {
    candidate: Shrunk,
    value: f64,
    majorized: bool,
}

fn trial<L: SmoothLoss>(
    loss: &L,
    bar: &DMatrix<f64>,
    f_bar: f64,
    grad: &DMatrix<f64>,
    scale: f64,
    tau: f64,
) -> Result<Trial> {
    let candidate = lowrank::shrink(&(bar - grad / tau), scale / tau)?;
    let value = loss.value(&candidate.matrix);
    let step = &candidate.matrix - bar;
    let bound = f_bar + step.dot(grad) + 0.5 * tau * step.norm_squared();
    let slack = 1e-10 * (1.0 + f_bar.abs());
    Ok(Trial {
        candidate,
        value,
        majorized: value.is_finite() && value <= bound + slack,
    })
}

/// Step-size search for the proximal step from `bar` with threshold
/// `scale / τ`.
///
/// Starting at `tau_start`, `τ` is multiplied by `α` while the candidate
/// built with the smaller `τ` still satisfies
/// `f(Λ⁺) ≤ f(Λ̄) + ⟨Λ⁺ - Λ̄, ∇f(Λ̄)⟩ + τ/2 ‖Λ⁺ - Λ̄‖²`, never going below
/// `floor · tau_max`. If the candidate at `tau_start` already fails, `τ` is
/// divided by `α` until it holds or `tau_max` is reached.
#[allow(clippy::too_many_arguments)]
pub fn line_search<L: SmoothLoss>(
    loss: &L,
    bar: &DMatrix<f64>,
    f_bar: f64,
    grad: &DMatrix<f64>,
    scale: f64,
    tau_start: f64,
    tau_max: f64,
    cfg: &LineSearchConfig,
) -> Result<LineSearchOutcome> {
    if !(tau_start > 0.0) || !(tau_max > 0.0) || !(scale >= 0.0) {
        return invalid("line search needs positive step bounds and a non-negative scale");
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) || !(cfg.floor > 0.0) {
        return invalid("line search needs alpha in (0, 1) and a positive floor");
    }
    let floor = cfg.floor * tau_max;
    let mut tau = tau_start.min(tau_max).max(floor);
    let mut cur = trial(loss, bar, f_bar, grad, scale, tau)?;
    let mut evaluations = 1;
    if !cur.majorized {
        while !cur.majorized && tau < tau_max {
            tau = (tau / cfg.alpha).min(tau_max);
            cur = trial(loss, bar, f_bar, grad, scale, tau)?;
            evaluations += 1;
        }
    } else {
        loop {
            let next_tau = tau * cfg.alpha;
            if next_tau < floor {
                break;
            }
            let next = trial(loss, bar, f_bar, grad, scale, next_tau)?;
            evaluations += 1;
            if !next.majorized {
                break;
            }
            tau = next_tau;
            cur = next;
        }
    }
    Ok(LineSearchOutcome {
        tau,
        majorized: cur.majorized,
        candidate: cur.candidate,
        value: cur.value,
        evaluations,
    })
}

/// Reduced basis `ψ_j = u_jᵀφ` from the leading singular triplets of `Λ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiBasis {
    /// `m × k`; column `j` holds `u_j`.
    #[serde(with = "crate::serde_vec::rows")]
    pub u: DMatrix<f64>,
    #[serde(with = "crate::serde_vec")]
    pub s: DVector<f64>,
    /// `k × N`; `β[j][i] = s_j (v_j)_i`.
    #[serde(with = "crate::serde_vec::rows")]
    pub beta: DMatrix<f64>,
    pub bag_ids: Vec<String>,
}

/// Rank tolerance below which directions are not offered as basis functions.
pub const PSI_RANK_TOL: f64 = 1e-8;

pub fn psi_basis(lambda: &LambdaMatrix, k: usize) -> Result<PsiBasis> {
    if k == 0 {
        return invalid("k must be at least 1");
    }
    let f = lowrank::svd(&lambda.data)?;
    let rank = f.s.iter().filter(|&&s| s > PSI_RANK_TOL).count();
    if k > rank {
        return invalid(format!("k = {k} exceeds the numeric rank {rank}"));
    }
    let f = f.truncate(k);
    let mut beta = f.v.transpose();
    for (j, mut row) in beta.row_iter_mut().enumerate() {
        row *= f.s[j];
    }
    Ok(PsiBasis {
        u: f.u,
        s: f.s,
        beta,
        bag_ids: lambda.bag_ids.clone(),
    })
}

impl PsiBasis {
    pub fn k(&self) -> usize {
        self.s.len()
    }

    /// `ψ(x) = Uᵀφ(x)`.
    pub fn eval<F: FeatureMap + ?Sized>(&self, map: &F, x: &[f64]) -> Result<DVector<f64>> {
        if map.num_features() != self.u.nrows() || x.len() != map.input_dim() {
            return invalid("psi basis: dimension mismatch");
        }
        let mut phi = vec![0.0; map.num_features()];
        map.eval_into(x, &mut phi);
        Ok(self.u.tr_mul(&DVector::from_vec(phi)))
    }

    /// `Σ_j β[j][i] ψ_j(x)` for bag `i`.
    pub fn reconstruct<F: FeatureMap + ?Sized>(&self, map: &F, i: usize, x: &[f64]) -> Result<f64> {
        if i >= self.beta.ncols() {
            return invalid(format!("bag index {i} out of range"));
        }
        Ok(self.eval(map, x)?.dot(&self.beta.column(i)))
    }

    /// Feature grid of the reduced basis.
    pub fn reduced_grid(&self, fg: &FeatureGrid) -> Result<FeatureGrid> {
        fg.project(&self.u)
    }

    /// Maximum-likelihood fit of a new bag restricted to `λ = Uβ`; the
    /// result lives on the full basis so it can be compared with any other
    /// density on `fg`.
    pub fn fit_density(
        &self,
        stats: &SufficientStats,
        fg: &FeatureGrid,
        reduced: &FeatureGrid,
        cfg: &NewtonConfig,
    ) -> Result<MEDensity> {
        if stats.m() != self.u.nrows() || reduced.num_features() != self.k() {
            return invalid("psi basis: dimension mismatch");
        }
        let target = self.u.tr_mul(&stats.phi_bar);
        let beta = maxent::newton_fit(
            stats.n as f64,
            &target,
            reduced,
            DVector::zeros(self.k()),
            cfg,
        )?;
        MEDensity::from_lambda(stats.bag_id.clone(), &self.u * beta, fg)
    }
}
