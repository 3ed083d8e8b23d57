//! Nuclear-norm regularized MDE: `min F(Λ) + η‖Λ‖_*` by monotone FISTA,
//! with an η continuation ladder and a bag-split cross-validation.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    bag_ids, check_stats_list, fit_mde, line_search, lipschitz_tau, FitReport, LambdaMatrix,
    LineSearchConfig, PartitionLoss, SmoothLoss,
};
use crate::basis::FeatureGrid;
use crate::error::{invalid, Result};
use crate::lowrank;
use crate::maxent::{self, NewtonConfig, SufficientStats};
use crate::rng;

/// Settings of the regularized solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmdeConfig {
    pub max_iter: usize,
    /// Bound on the prox-stationarity residual `‖Λ - D_{η/τ}(Λ - ∇F/τ)‖_F`.
    pub obj_tol: f64,
    pub ls_alpha: f64,
    pub tau_floor: f64,
    /// Continuation: ratio between successive η.
    pub eta_factor: f64,
    /// Continuation: last η as a fraction of the first.
    pub eta_floor_ratio: f64,
    /// Cross-validation: fraction of bags used for training.
    pub train_fraction: f64,
}

impl Default for RmdeConfig {
    fn default() -> Self {
        RmdeConfig {
            max_iter: 500,
            obj_tol: 1e-3,
            ls_alpha: 0.7,
            tau_floor: 1e-3,
            eta_factor: 0.1,
            eta_floor_ratio: 1e-3,
            train_fraction: 0.7,
        }
    }
}

impl RmdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 || !(self.obj_tol > 0.0) {
            return invalid("max_iter and obj_tol must be positive");
        }
        if !(self.ls_alpha > 0.0 && self.ls_alpha < 1.0) {
            return invalid("ls_alpha must lie in (0, 1)");
        }
        if !(self.tau_floor > 0.0 && self.tau_floor <= 1.0) {
            return invalid("tau_floor must lie in (0, 1]");
        }
        if !(self.eta_factor > 0.0 && self.eta_factor < 1.0) {
            return invalid("eta_factor must lie in (0, 1)");
        }
        if !(self.eta_floor_ratio > 0.0 && self.eta_floor_ratio <= 1.0) {
            return invalid("eta_floor_ratio must lie in (0, 1]");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return invalid("train_fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

struct Stage {
    lambda: DMatrix<f64>,
    nuclear: f64,
    loss: f64,
    rank: usize,
    iters: usize,
    converged: bool,
    violations: usize,
    evaluations: usize,
}

fn solve_stage(
    loss: &PartitionLoss,
    eta: f64,
    start: DMatrix<f64>,
    tau_l: f64,
    cfg: &RmdeConfig,
) -> Result<Stage> {
    let ls = LineSearchConfig {
        alpha: cfg.ls_alpha,
        floor: cfg.tau_floor,
    };
    let mut x = start;
    let mut x_nuc = lowrank::svd(&x)?.s.sum();
    let mut x_loss = loss.value(&x);
    let mut x_rank = lowrank::svd(&x)?.s.iter().filter(|&&s| s > 0.0).count();
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut restarted = true;
    let mut tau = tau_l;
    let mut violations = 0;
    let mut evaluations = 0;
    let mut iters = 0;
    let mut converged = false;
    while iters < cfg.max_iter {
        let (f_y, grad_y) = loss.value_and_grad(&y);
        let step = line_search(loss, &y, f_y, &grad_y, eta, tau, tau_l, &ls)?;
        if !step.majorized {
            violations += 1;
        }
        tau = step.tau;
        evaluations += step.evaluations;
        let z_nuc = step.candidate.nuclear_norm();
        let z_obj = step.value + eta * z_nuc;
        let z = step.candidate.matrix;
        // From y = x a majorized step cannot increase the objective except
        // by rounding, so it is taken even when the comparison says no.
        if z_obj <= x_loss + eta * x_nuc || (restarted && step.majorized) {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &z + (&z - &x) * ((t - 1.0) / t_next);
            x = z;
            x_nuc = z_nuc;
            x_loss = step.value;
            x_rank = step.candidate.singular_values.len();
            t = t_next;
            restarted = false;
        } else {
            // rejected candidate: restart the momentum from x
            y = x.clone();
            t = 1.0;
            restarted = true;
        }
        iters += 1;

        let (_, grad_x) = loss.value_and_grad(&x);
        let fixed = lowrank::shrink(&(&x - &grad_x / tau), eta / tau)?;
        if (&x - &fixed.matrix).norm() <= cfg.obj_tol {
            converged = true;
            break;
        }
    }
    Ok(Stage {
        lambda: x,
        nuclear: x_nuc,
        loss: x_loss,
        rank: x_rank,
        iters,
        converged,
        violations,
        evaluations,
    })
}

fn run_stages(
    stats: &[SufficientStats],
    fg: &FeatureGrid,
    etas: &[f64],
    start: DMatrix<f64>,
    cfg: &RmdeConfig,
    solver: &str,
) -> Result<(LambdaMatrix, FitReport)> {
    let started = Instant::now();
    let (m, n_bags) = start.shape();
    let tau_l = lipschitz_tau(stats, m)?;
    let loss = PartitionLoss::likelihood(stats, fg);
    let mut report = FitReport::new(solver, n_bags, m, tau_l);
    let mut current = start;
    let mut all_converged = true;
    for &eta in etas {
        let stage = solve_stage(&loss, eta, current, tau_l, cfg)?;
        log::debug!(
            "rmde η = {eta:.4e}: ‖Λ‖* = {:.6}, rank {}, {} iterations",
            stage.nuclear,
            stage.rank,
            stage.iters
        );
        report.push(stage.nuclear, stage.loss, stage.rank, stage.iters);
        report.eta_trace.push(eta);
        report.majorization_violations += stage.violations;
        report.line_search_evaluations += stage.evaluations;
        all_converged &= stage.converged;
        current = stage.lambda;
    }
    report.converged = all_converged;
    if !all_converged {
        report.warning = Some(format!(
            "iteration budget of {} exhausted before the stationarity tolerance",
            cfg.max_iter
        ));
    }
    report.wall_time = started.elapsed().as_secs_f64();
    Ok((LambdaMatrix::new(current, bag_ids(stats))?, report))
}

/// Proximal gradient solve at a fixed `η`, from `start` (zeros if absent).
pub fn fit_rmde(
    stats: &[SufficientStats],
    fg: &FeatureGrid,
    eta: f64,
    start: Option<&LambdaMatrix>,
    cfg: &RmdeConfig,
) -> Result<(LambdaMatrix, FitReport)> {
    check_stats_list(stats, fg)?;
    cfg.validate()?;
    if !(eta > 0.0) || !eta.is_finite() {
        return invalid(format!("eta must be positive, got {eta}"));
    }
    let m = fg.num_features();
    let start = match start {
        Some(s) if s.data.shape() == (m, stats.len()) => s.data.clone(),
        Some(_) => return invalid("start matrix does not match the bags and features"),
        None => DMatrix::zeros(m, stats.len()),
    };
    run_stages(stats, fg, &[eta], start, cfg, "rmde")
}

/// `η⁰, f η⁰, f² η⁰, …` down to and including `floor_ratio · η⁰`.
pub fn continuation_schedule(eta0: f64, factor: f64, floor_ratio: f64) -> Result<Vec<f64>> {
    if !(eta0 > 0.0)
        || !(factor > 0.0 && factor < 1.0)
        || !(floor_ratio > 0.0 && floor_ratio <= 1.0)
    {
        return invalid("continuation schedule needs eta0 > 0, factor and floor_ratio in (0, 1)");
    }
    let floor = floor_ratio * eta0;
    let mut etas = vec![eta0];
    let mut eta = eta0;
    // relative slack so that 0.1³ lands on 1e-3 despite rounding
    while eta > floor * (1.0 + 1e-9) {
        eta = (eta * factor).max(floor);
        if eta <= floor * (1.0 + 1e-9) {
            eta = floor;
        }
        etas.push(eta);
    }
    Ok(etas)
}

/// Fits `Λ̂` and runs [`rmde_continuation_from`].
pub fn rmde_continuation(
    stats: &[SufficientStats],
    fg: &FeatureGrid,
    newton: &NewtonConfig,
    cfg: &RmdeConfig,
) -> Result<(LambdaMatrix, FitReport)> {
    let lambda_hat = fit_mde(stats, fg, newton)?;
    rmde_continuation_from(&lambda_hat, stats, fg, cfg)
}

/// Solves down the ladder `η⁰ = ‖Λ̂‖²_F`, each stage warm-started from the
/// previous solution (the first from `Λ̂`).
pub fn rmde_continuation_from(
    lambda_hat: &LambdaMatrix,
    stats: &[SufficientStats],
    fg: &FeatureGrid,
    cfg: &RmdeConfig,
) -> Result<(LambdaMatrix, FitReport)> {
    check_stats_list(stats, fg)?;
    cfg.validate()?;
    if lambda_hat.data.shape() != (fg.num_features(), stats.len()) {
        return invalid("Λ̂ does not match the bags and features");
    }
    let eta0 = lambda_hat.data.norm_squared();
    if !(eta0 > 0.0) {
        return invalid("Λ̂ is zero; the continuation ladder is empty");
    }
    let etas = continuation_schedule(eta0, cfg.eta_factor, cfg.eta_floor_ratio)?;
    run_stages(
        stats,
        fg,
        &etas,
        lambda_hat.data.clone(),
        cfg,
        "rmde-continuation",
    )
}

/// Outcome of [`rmde_cross_validate`].
#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub best_eta: f64,
    /// Held-out error per candidate η, in input order.
    pub scores: Vec<f64>,
    /// Refit on all bags at `best_eta`.
    pub lambda: LambdaMatrix,
    pub report: FitReport,
}

/// Held-out error: each test bag is scored against the trained column that
/// explains it best, `min_j n (Z(λ_j) - λ_jᵀ φ̄)`.
fn held_out_error(trained: &DMatrix<f64>, test: &[&SufficientStats], fg: &FeatureGrid) -> f64 {
    let zs = maxent::log_partitions(trained, fg);
    test.iter()
        .map(|s| {
            let scores = trained.tr_mul(&s.phi_bar);
            let best = zs
                .iter()
                .zip(scores.iter())
                .map(|(z, sc)| z - sc)
                .fold(f64::INFINITY, f64::min);
            s.n as f64 * best
        })
        .sum()
}

/// Selects η on a seeded 70/30 bag split, then refits all bags.
pub fn rmde_cross_validate(
    stats: &[SufficientStats],
    fg: &FeatureGrid,
    etas: &[f64],
    split_seed: u64,
    newton: &NewtonConfig,
    cfg: &RmdeConfig,
) -> Result<CrossValidation> {
    check_stats_list(stats, fg)?;
    cfg.validate()?;
    if etas.is_empty() {
        return invalid("no regularization weights to try");
    }
    if stats.len() < 4 {
        return invalid(format!(
            "cross-validation needs at least 4 bags, got {}",
            stats.len()
        ));
    }
    let mut order: Vec<usize> = (0..stats.len()).collect();
    order.shuffle(&mut rng::seeded(split_seed));
    let n_train =
        ((cfg.train_fraction * stats.len() as f64).round() as usize).clamp(1, stats.len() - 1);
    let train: Vec<SufficientStats> = order[..n_train].iter().map(|&i| stats[i].clone()).collect();
    let test: Vec<&SufficientStats> = order[n_train..].iter().map(|&i| &stats[i]).collect();

    let train_hat = fit_mde(&train, fg, newton)?;
    let mut scores = Vec::with_capacity(etas.len());
    for &eta in etas {
        let (fit, _) = fit_rmde(&train, fg, eta, Some(&train_hat), cfg)?;
        let err = held_out_error(&fit.data, &test, fg);
        log::debug!("rmde cv η = {eta:.1e}: held-out error {err:.6}");
        scores.push(err);
    }
    let best = scores
        .iter()
        .enumerate()
        .fold(0, |b, (i, s)| if *s < scores[b] { i } else { b });
    let best_eta = etas[best];
    let lambda_hat = fit_mde(stats, fg, newton)?;
    let (lambda, mut report) = fit_rmde(stats, fg, best_eta, Some(&lambda_hat), cfg)?;
    report.solver = "rmde-cv".into();
    Ok(CrossValidation {
        best_eta,
        scores,
        lambda,
        report,
    })
}
