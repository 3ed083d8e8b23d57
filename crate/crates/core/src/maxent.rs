//! Single-bag maximum-entropy machinery.
//!
//! A bag with empirical feature mean `φ̄` is modeled by
//! `p_λ(x) = exp(λᵀφ(x) - Z(λ))`. The maximum-likelihood `λ̂` minimizes
//! `n (Z(λ) - λᵀφ̄)`, whose gradient is `n (E_λ[φ] - φ̄)` and whose Hessian
//! is `n Cov_λ[φ]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, Domain, FeatureGrid, FeatureMap};
use crate::error::{invalid, Error, Result};

/// Per-bag instance count and empirical feature mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficientStats {
    pub bag_id: String,
    pub n: usize,
    #[serde(with = "crate::serde_vec")]
    pub phi_bar: DVector<f64>,
}

impl SufficientStats {
    pub fn new(bag_id: impl Into<String>, n: usize, phi_bar: DVector<f64>) -> Result<Self> {
        let bag_id = bag_id.into();
        if n == 0 {
            return invalid(format!("bag {bag_id}: instance count must be positive"));
        }
        if phi_bar.iter().any(|v| !(v.abs() <= 1.0)) {
            return invalid(format!("bag {bag_id}: feature means must lie in [-1, 1]"));
        }
        Ok(SufficientStats { bag_id, n, phi_bar })
    }

    /// `φ̄ = (1/n) Σ_j φ(x_j)` over the rows of `bag`.
    pub fn from_instances(
        bag: &DMatrix<f64>,
        spec: &BasisSpec,
        bag_id: impl Into<String>,
    ) -> Result<Self> {
        let bag_id = bag_id.into();
        if bag.nrows() == 0 {
            return invalid(format!("bag {bag_id} has no instances"));
        }
        if bag.ncols() != spec.d() {
            return invalid(format!(
                "bag {bag_id}: instances have dimension {}, basis expects {}",
                bag.ncols(),
                spec.d()
            ));
        }
        if bag.iter().any(|v| !v.is_finite()) {
            return invalid(format!("bag {bag_id}: instances contain non-finite values"));
        }
        let m = spec.m();
        let mut acc = DVector::zeros(m);
        let mut row = vec![0.0; m];
        let mut x = vec![0.0; spec.d()];
        for i in 0..bag.nrows() {
            for j in 0..spec.d() {
                x[j] = bag[(i, j)];
            }
            spec.eval_into(&x, &mut row);
            for k in 0..m {
                acc[k] += row[k];
            }
        }
        let n = bag.nrows();
        acc /= n as f64;
        Ok(SufficientStats {
            bag_id,
            n,
            phi_bar: acc,
        })
    }

    pub fn m(&self) -> usize {
        self.phi_bar.len()
    }
}

/// A fitted density with its log-partition and feature mean cached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MEDensity {
    pub bag_id: String,
    #[serde(with = "crate::serde_vec")]
    pub lambda: DVector<f64>,
    #[serde(rename = "logZ")]
    pub log_z: f64,
    #[serde(with = "crate::serde_vec")]
    pub mean_phi: DVector<f64>,
    /// Fingerprint of the feature map the density lives on; restored from
    /// the enclosing model file when loading.
    #[serde(skip)]
    pub basis_fingerprint: u64,
}

impl MEDensity {
    /// Evaluates `Z(λ)` and `E_λ[φ]` on the grid.
    pub fn from_lambda(
        bag_id: impl Into<String>,
        lambda: DVector<f64>,
        fg: &FeatureGrid,
    ) -> Result<Self> {
        let (log_z, mean_phi) = log_partition_and_mean(&lambda, fg)?;
        Ok(MEDensity {
            bag_id: bag_id.into(),
            lambda,
            log_z,
            mean_phi,
            basis_fingerprint: fg.fingerprint(),
        })
    }

    pub fn m(&self) -> usize {
        self.lambda.len()
    }
}

/// Damped Newton settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NewtonConfig {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub armijo_c: f64,
    pub backtrack_rho: f64,
    pub hessian_ridge: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            max_iters: 50,
            grad_tol: 1e-8,
            armijo_c: 1e-4,
            backtrack_rho: 0.5,
            hessian_ridge: 1e-8,
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0
            || !(self.grad_tol > 0.0)
            || !(self.armijo_c > 0.0)
            || !(self.hessian_ridge > 0.0)
        {
            return invalid("Newton settings must all be positive");
        }
        if !(self.backtrack_rho > 0.0 && self.backtrack_rho < 1.0) {
            return invalid("backtrack_rho must lie in (0, 1)");
        }
        Ok(())
    }
}

fn check_lambda(lambda: &DVector<f64>, fg: &FeatureGrid) -> Result<()> {
    if lambda.len() != fg.num_features() {
        return invalid(format!(
            "parameter vector has length {}, features have {}",
            lambda.len(),
            fg.num_features()
        ));
    }
    if lambda.iter().any(|v| !v.is_finite()) {
        return invalid("parameter vector contains non-finite entries");
    }
    Ok(())
}

// exp() is slow on the underflow path and the terms are negligible anyway
const EXP_CUTOFF: f64 = -700.0;

#[inline]
fn exp_shifted(d: f64) -> f64 {
    if d < EXP_CUTOFF {
        0.0
    } else {
        d.exp()
    }
}

/// Max-shifted log-sum-exp of `s_q + log w_q`. On return `buf` holds the
/// normalized node probabilities `π_q`.
fn lse_into(scores: &[f64], log_w: &[f64], buf: &mut [f64]) -> f64 {
    let mut mx = f64::NEG_INFINITY;
    for ((b, s), w) in buf.iter_mut().zip(scores).zip(log_w) {
        *b = s + w;
        mx = mx.max(*b);
    }
    let mut sum = 0.0;
    for b in buf.iter_mut() {
        *b = exp_shifted(*b - mx);
        sum += *b;
    }
    let inv = 1.0 / sum;
    for b in buf.iter_mut() {
        *b *= inv;
    }
    mx + sum.ln()
}

fn lse_probs(scores: &DVector<f64>, log_w: &DVector<f64>) -> (f64, DVector<f64>) {
    let mut pi = DVector::zeros(scores.len());
    let z = lse_into(scores.as_slice(), log_w.as_slice(), pi.as_mut_slice());
    (z, pi)
}

fn lse(scores: &DVector<f64>, log_w: &DVector<f64>) -> f64 {
    let mut buf = vec![0.0; scores.len()];
    lse_into(scores.as_slice(), log_w.as_slice(), &mut buf)
}

/// `Z(λ) = log Σ_q w_q exp(λᵀφ(x_q))`.
pub fn log_partition(lambda: &DVector<f64>, fg: &FeatureGrid) -> Result<f64> {
    check_lambda(lambda, fg)?;
    Ok(lse(&(fg.phi() * lambda), fg.log_weights()))
}

fn log_partition_and_mean(lambda: &DVector<f64>, fg: &FeatureGrid) -> Result<(f64, DVector<f64>)> {
    check_lambda(lambda, fg)?;
    let (z, pi) = lse_probs(&(fg.phi() * lambda), fg.log_weights());
    Ok((z, fg.phi_t() * pi))
}

fn moments_full(lambda: &DVector<f64>, fg: &FeatureGrid) -> (f64, DVector<f64>, DMatrix<f64>) {
    let phi = fg.phi();
    let (z, pi) = lse_probs(&(phi * lambda), fg.log_weights());
    let mean = fg.phi_t() * &pi;
    // Σ_q π_q φφᵀ via (√π ⊙ Φ)ᵀ(√π ⊙ Φ)
    let mut scaled = phi.clone();
    for (mut row, &p) in scaled.row_iter_mut().zip(pi.iter()) {
        row *= p.sqrt();
    }
    let mut cov = scaled.transpose() * &scaled;
    cov -= &mean * mean.transpose();
    // symmetrize away rounding
    let cov = (&cov + cov.transpose()) * 0.5;
    (z, mean, cov)
}

/// Mean and covariance of `φ` under `p_λ`.
pub fn density_moments(
    lambda: &DVector<f64>,
    fg: &FeatureGrid,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_lambda(lambda, fg)?;
    let (_, mean, cov) = moments_full(lambda, fg);
    Ok((mean, cov))
}

/// Log-partitions of every column of `lambdas` (`m × N`).
pub(crate) fn log_partitions(lambdas: &DMatrix<f64>, fg: &FeatureGrid) -> Vec<f64> {
    let scores = fg.phi() * lambdas;
    let log_w = fg.log_weights().as_slice();
    let mut buf = vec![0.0; scores.nrows()];
    scores
        .as_slice()
        .chunks_exact(scores.nrows())
        .map(|c| lse_into(c, log_w, &mut buf))
        .collect()
}

/// Log-partitions and feature means of every column of `lambdas`.
pub(crate) fn log_partitions_and_means(
    lambdas: &DMatrix<f64>,
    fg: &FeatureGrid,
) -> (Vec<f64>, DMatrix<f64>) {
    let mut probs = fg.phi() * lambdas;
    let q = probs.nrows();
    let log_w = fg.log_weights().as_slice();
    let mut buf = vec![0.0; q];
    let zs = probs
        .as_mut_slice()
        .chunks_exact_mut(q)
        .map(|c| {
            let z = lse_into(c, log_w, &mut buf);
            c.copy_from_slice(&buf);
            z
        })
        .collect();
    (zs, fg.phi_t() * probs)
}

fn check_stats(stats: &SufficientStats, fg: &FeatureGrid) -> Result<()> {
    if stats.m() != fg.num_features() {
        return invalid(format!(
            "bag {} has {} feature means, features have {}",
            stats.bag_id,
            stats.m(),
            fg.num_features()
        ));
    }
    Ok(())
}

/// Negative log-likelihood up to a constant: `n (Z(λ) - λᵀφ̄)`.
pub fn sde_objective(
    lambda: &DVector<f64>,
    stats: &SufficientStats,
    fg: &FeatureGrid,
) -> Result<f64> {
    check_stats(stats, fg)?;
    let z = log_partition(lambda, fg)?;
    Ok(stats.n as f64 * (z - lambda.dot(&stats.phi_bar)))
}

/// Gradient `n (E_λ[φ] - φ̄)` and Hessian `n Cov_λ[φ]` of [`sde_objective`].
pub fn sde_grad_hess(
    lambda: &DVector<f64>,
    stats: &SufficientStats,
    fg: &FeatureGrid,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_stats(stats, fg)?;
    check_lambda(lambda, fg)?;
    let n = stats.n as f64;
    let (_, mean, cov) = moments_full(lambda, fg);
    Ok(((mean - &stats.phi_bar) * n, cov * n))
}

/// Maximum-likelihood fit of a single bag by damped Newton with Armijo
/// backtracking, started from the uniform density `λ = 0`.
pub fn fit_sde(stats: &SufficientStats, fg: &FeatureGrid, cfg: &NewtonConfig) -> Result<MEDensity> {
    check_stats(stats, fg)?;
    cfg.validate()?;
    let lambda = newton_fit(
        stats.n as f64,
        &stats.phi_bar,
        fg,
        DVector::zeros(fg.num_features()),
        cfg,
    )?;
    MEDensity::from_lambda(stats.bag_id.clone(), lambda, fg)
}

/// Minimizes `n (Z(λ) - λᵀ target)` from `start`. Shared by [`fit_sde`] and
/// reduced-basis fits where `target` is a projected feature mean.
pub(crate) fn newton_fit(
    n: f64,
    target: &DVector<f64>,
    fg: &FeatureGrid,
    start: DVector<f64>,
    cfg: &NewtonConfig,
) -> Result<DVector<f64>> {
    let m = fg.num_features();
    let mut lambda = start;
    let mut f = n * (lse(&(fg.phi() * &lambda), fg.log_weights()) - lambda.dot(target));
    for _ in 0..cfg.max_iters {
        let (_, mean, cov) = moments_full(&lambda, fg);
        let grad = (mean - target) * n;
        if grad.amax() <= cfg.grad_tol {
            return Ok(lambda);
        }
        let mut hess = cov * n;
        for k in 0..m {
            hess[(k, k)] += cfg.hessian_ridge;
        }
        let step = match hess.cholesky() {
            Some(ch) => -ch.solve(&grad),
            None => -&grad,
        };
        let slope = grad.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-14 {
            let cand = &lambda + &step * t;
            let zc = lse(&(fg.phi() * &cand), fg.log_weights());
            let fc = n * (zc - cand.dot(target));
            if fc <= f + cfg.armijo_c * t * slope {
                lambda = cand;
                f = fc;
                accepted = true;
                break;
            }
            // Near the optimum the decrease drops below the resolution of
            // f; a step that keeps f within rounding and shrinks the
            // gradient is still progress.
            if (fc - f).abs() <= 1e-13 * f.abs().max(1.0) {
                let (_, mc) = log_partition_and_mean(&cand, fg)?;
                if ((mc - target) * n).amax() < grad.amax() {
                    lambda = cand;
                    f = fc;
                    accepted = true;
                    break;
                }
            }
            t *= cfg.backtrack_rho;
        }
        if !accepted {
            // no decrease representable in floating point; the gradient
            // test below decides whether this is good enough
            break;
        }
    }
    let (_, mean) = log_partition_and_mean(&lambda, fg)?;
    let grad_norm = ((mean - target) * n).amax();
    if grad_norm <= cfg.grad_tol {
        Ok(lambda)
    } else {
        Err(Error::Convergence {
            iterations: cfg.max_iters,
            grad_norm,
        })
    }
}

fn check_pair(p: &MEDensity, q: &MEDensity) -> Result<()> {
    if p.m() != q.m() || p.basis_fingerprint != q.basis_fingerprint {
        return invalid(format!(
            "densities {} and {} were fitted on different bases",
            p.bag_id, q.bag_id
        ));
    }
    Ok(())
}

/// `D(p‖q) = (λ_p - λ_q)ᵀ E_p[φ] - (Z(λ_p) - Z(λ_q))`.
pub fn kl(p: &MEDensity, q: &MEDensity) -> Result<f64> {
    check_pair(p, q)?;
    Ok((&p.lambda - &q.lambda).dot(&p.mean_phi) - (p.log_z - q.log_z))
}

/// `D(p‖q) + D(q‖p) = (λ_p - λ_q)ᵀ (E_p[φ] - E_q[φ])`.
pub fn sym_kl(p: &MEDensity, q: &MEDensity) -> Result<f64> {
    check_pair(p, q)?;
    Ok((&p.lambda - &q.lambda).dot(&(&p.mean_phi - &q.mean_phi)))
}

/// Value of `log p(x)` and whether `x` lies in the fitting domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogDensity {
    pub value: f64,
    pub in_domain: bool,
}

/// `λᵀφ(x) - Z(λ)`. Points outside the domain get the formula value with
/// `in_domain = false`.
pub fn log_density<F: FeatureMap + ?Sized>(
    p: &MEDensity,
    map: &F,
    domain: &Domain,
    x: &[f64],
) -> Result<LogDensity> {
    if x.len() != map.input_dim() || p.m() != map.num_features() {
        return invalid("log_density: dimension mismatch");
    }
    let mut phi = vec![0.0; map.num_features()];
    map.eval_into(x, &mut phi);
    let s: f64 = phi.iter().zip(p.lambda.iter()).map(|(a, b)| a * b).sum();
    Ok(LogDensity {
        value: s - p.log_z,
        in_domain: domain.contains(x),
    })
}

/// Hoeffding radius `sqrt(2 log(2m/η)) / sqrt(n)`: with probability at
/// least `1 - η`, every coordinate of `φ̄ - E[φ]` is within this bound.
pub fn hoeffding_delta_bound(n: usize, m: usize, eta: f64) -> Result<f64> {
    if n == 0 || m == 0 {
        return invalid("n and m must be positive");
    }
    if !(eta > 0.0 && eta < 1.0) {
        return invalid(format!("eta must lie in (0, 1), got {eta}"));
    }
    Ok((2.0 * (2.0 * m as f64 / eta).ln()).sqrt() / (n as f64).sqrt())
}
