//! Confidence-constrained nuclear norm minimization: bisection on the dual
//! variable `z` around an accelerated proximal gradient inner solve.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{
    bag_ids, check_stats_list, epsilon_bound, fit_mde, line_search, lipschitz_tau, FitReport,
    LambdaMatrix, LineSearchConfig, PartitionLoss, SmoothLoss,
};
use crate::basis::FeatureGrid;
use crate::error::{invalid, Error, Result};
use crate::lowrank;
use crate::maxent::{NewtonConfig, SufficientStats};

/// Settings of the CMENA solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmenaConfig {
    /// Confidence multiplier; `ε = a N m / 2`.
    pub a: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub obj_tol: f64,
    pub cons_tol: f64,
    pub ls_alpha: f64,
    pub tau_floor: f64,
    /// Initial bisection bracket for `z`. When absent the search starts at
    /// `z₀ = 1/‖∇g(0)‖₂`, the largest `z` whose solution is the zero matrix,
    /// and doubles upward until the constraint is met.
    pub z_bracket: Option<(f64, f64)>,
    /// Starting point of the accelerated sequence.
    pub init: CmenaInit,
    /// Start each inner solve from the previous outer iterate (with fresh
    /// momentum) instead of from `init`.
    pub warm_start: bool,
}

impl Default for CmenaConfig {
    fn default() -> Self {
        CmenaConfig {
            a: 1.0,
            max_outer: 30,
            max_inner: 100,
            obj_tol: 1e-2,
            cons_tol: 1e-1,
            ls_alpha: 0.7,
            tau_floor: 1e-3,
            z_bracket: None,
            init: CmenaInit::Zero,
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CmenaInit {
    /// The maximum-likelihood estimate `Λ̂`.
    Mle,
    Zero,
}

impl CmenaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0) {
            return invalid("a must be positive");
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return invalid("iteration budgets must be positive");
        }
        if !(self.obj_tol > 0.0 && self.cons_tol > 0.0) {
            return invalid("tolerances must be positive");
        }
        if !(self.ls_alpha > 0.0 && self.ls_alpha < 1.0) {
            return invalid("ls_alpha must lie in (0, 1)");
        }
        if !(self.tau_floor > 0.0 && self.tau_floor <= 1.0) {
            return invalid("tau_floor must lie in (0, 1]");
        }
        if let Some((lo, hi)) = self.z_bracket {
            if !(lo >= 0.0 && hi > lo && hi.is_finite()) {
                return invalid("z bracket needs 0 <= lo < hi");
            }
        }
        Ok(())
    }
}

/// Fits `Λ̂` with [`fit_mde`] and runs CMENA from it.
pub fn fit_cmen(
    stats: &[SufficientStats],
    fg: &FeatureGrid,
    newton: &NewtonConfig,
    cfg: &CmenaConfig,
) -> Result<(LambdaMatrix, FitReport)> {
    let lambda_hat = fit_mde(stats, fg, newton)?;
    fit_cmen_from(&lambda_hat, stats, fg, cfg)
}

struct Inner {
    lambda: DMatrix<f64>,
    nuclear: f64,
    g: f64,
    rank: usize,
    iters: usize,
    /// Stopped on the tolerances rather than the budget.
    settled: bool,
}

/// Accelerated sequence `Λ^k, Λ^{k-1}, a^k, a^{k-1}`.
#[derive(Clone)]
struct State {
    cur: DMatrix<f64>,
    prev: DMatrix<f64>,
    a_cur: f64,
    a_prev: f64,
}

impl State {
    fn at(start: &DMatrix<f64>) -> Self {
        State {
            cur: start.clone(),
            prev: start.clone(),
            a_cur: 1.0,
            a_prev: 1.0,
        }
    }
}

struct InnerSolver<'a> {
    loss: &'a PartitionLoss<'a>,
    cfg: &'a CmenaConfig,
    ls: LineSearchConfig,
    tau_max: f64,
    tau: f64,
    violations: usize,
    evaluations: usize,
}

impl InnerSolver<'_> {
    /// Accelerated proximal gradient on `‖Λ‖_* + z g(Λ)`.
    fn solve(&mut self, z: f64, state: &mut State) -> Result<Inner> {
        let mut cur_nuc = lowrank::svd(&state.cur)?.s.sum();
        let mut cur_g = self.loss.value(&state.cur);
        let mut cur_rank = lowrank::svd(&state.cur)?
            .s
            .iter()
            .filter(|&&s| s > 0.0)
            .count();
        let mut iters = 0;
        let mut settled = false;
        while iters < self.cfg.max_inner {
            let beta = (state.a_prev - 1.0) / state.a_cur;
            let bar = &state.cur + (&state.cur - &state.prev) * beta;
            let (g_bar, grad) = self.loss.value_and_grad(&bar);
            let step = line_search(
                self.loss,
                &bar,
                g_bar,
                &grad,
                1.0 / z,
                self.tau,
                self.tau_max,
                &self.ls,
            )?;
            if !step.majorized {
                self.violations += 1;
                log::warn!("majorization failed at tau = {:.4e}", step.tau);
            }
            self.tau = step.tau;
            self.evaluations += step.evaluations;
            let new_nuc = step.candidate.nuclear_norm();
            let new_g = step.value;
            // only judged once momentum is back in play: plain proximal
            // steps right after a reset can be tiny far from the optimum
            let done = beta > 0.0
                && (new_nuc - cur_nuc).abs() < self.cfg.obj_tol
                && (new_g - cur_g).abs() < self.cfg.cons_tol;
            // momentum restart once the Lagrangian goes up
            let rising = new_nuc + z * new_g > cur_nuc + z * cur_g;
            cur_rank = step.candidate.singular_values.len();
            state.prev = std::mem::replace(&mut state.cur, step.candidate.matrix);
            cur_nuc = new_nuc;
            cur_g = new_g;
            if rising {
                state.a_prev = 1.0;
                state.a_cur = 1.0;
            } else {
                state.a_prev = state.a_cur;
                state.a_cur = 0.5 * (1.0 + (1.0 + 4.0 * state.a_cur * state.a_cur).sqrt());
            }
            iters += 1;
            if done {
                settled = true;
                break;
            }
        }
        Ok(Inner {
            lambda: state.cur.clone(),
            nuclear: cur_nuc,
            g: cur_g,
            rank: cur_rank,
            iters,
            settled,
        })
    }
}

/// CMENA from a given maximum-likelihood estimate `Λ̂`.
///
/// Returns the final iterate when `|g - ε| < cons_tol`; otherwise the
/// feasible iterate (`g ≤ ε + cons_tol`) of smallest nuclear norm, with
/// `report.warning` set.
pub fn fit_cmen_from(
    lambda_hat: &LambdaMatrix,
    stats: &[SufficientStats],
    fg: &FeatureGrid,
    cfg: &CmenaConfig,
) -> Result<(LambdaMatrix, FitReport)> {
    let started = Instant::now();
    check_stats_list(stats, fg)?;
    cfg.validate()?;
    if lambda_hat.num_bags() != stats.len() || lambda_hat.m() != fg.num_features() {
        return invalid("Λ̂ does not match the bags and features");
    }
    let (m, n_bags) = lambda_hat.data.shape();
    let eps = epsilon_bound(n_bags, m, cfg.a)?;
    let tau_l = lipschitz_tau(stats, m)?;
    let loss = PartitionLoss::kl_sum(stats, &lambda_hat.data, fg);
    let mut report = FitReport::new("cmen", n_bags, m, tau_l);
    report.epsilon = Some(eps);

    let g_hat = loss.value(&lambda_hat.data);
    if g_hat > eps + cfg.cons_tol {
        return Err(Error::Internal(format!(
            "Λ̂ violates its own confidence ball: g = {g_hat:.6e} > ε = {eps}"
        )));
    }
    let zero = DMatrix::zeros(m, n_bags);
    let g_zero = loss.value(&zero);
    if g_zero <= eps {
        report.push(0.0, g_zero - eps, 0, 0);
        report.converged = true;
        report.wall_time = started.elapsed().as_secs_f64();
        return Ok((LambdaMatrix::new(zero, bag_ids(stats))?, report));
    }

    let mut inner = InnerSolver {
        loss: &loss,
        cfg,
        ls: LineSearchConfig {
            alpha: cfg.ls_alpha,
            floor: cfg.tau_floor,
        },
        tau_max: tau_l,
        tau: tau_l,
        violations: 0,
        evaluations: 0,
    };
    let (mut z_lo, mut z_hi) = match cfg.z_bracket {
        Some(b) => b,
        None => {
            let (_, grad0) = loss.value_and_grad(&zero);
            let z0 = 1.0 / lowrank::svd(&grad0)?.s[0];
            (z0, 2.0 * z0)
        }
    };
    let mut bracketed = false;
    let mut best: Option<(DMatrix<f64>, f64)> = None;
    let mut last: Option<DMatrix<f64>> = None;
    let init = match cfg.init {
        CmenaInit::Mle => lambda_hat.data.clone(),
        CmenaInit::Zero => zero.clone(),
    };
    let mut state = State::at(&init);
    let mut converged = false;

    for _ in 0..cfg.max_outer {
        let z = if bracketed { 0.5 * (z_lo + z_hi) } else { z_hi };
        state = if cfg.warm_start {
            State::at(&state.cur)
        } else {
            State::at(&init)
        };
        let sol = inner.solve(z, &mut state)?;
        let gap = sol.g - eps;
        report.push(sol.nuclear, gap, sol.rank, sol.iters);
        report.z_trace.push(z);
        log::debug!(
            "cmen z = {z:.6e}: ‖Λ‖* = {:.6}, g - ε = {gap:.4}, rank {}, {} inner",
            sol.nuclear,
            sol.rank,
            sol.iters
        );
        if gap <= cfg.cons_tol && best.as_ref().is_none_or(|(_, nuc)| sol.nuclear < *nuc) {
            best = Some((sol.lambda.clone(), sol.nuclear));
        }
        if gap.abs() < cfg.cons_tol {
            converged = true;
            last = Some(sol.lambda);
            break;
        }
        if cfg.warm_start && !sol.settled {
            // verdict of an unfinished solve is not trusted; keep going at this z
        } else if gap >= 0.0 {
            z_lo = z;
            if !bracketed {
                z_hi *= 2.0;
            }
        } else {
            z_hi = z;
            bracketed = true;
        }
        last = Some(sol.lambda);
    }

    report.majorization_violations = inner.violations;
    report.line_search_evaluations = inner.evaluations;
    report.converged = converged;
    let result = if converged {
        last.unwrap()
    } else {
        report.warning = Some(format!(
            "outer budget of {} iterations exhausted; returning the best feasible iterate",
            cfg.max_outer
        ));
        match best {
            Some((lambda, _)) => lambda,
            None => lambda_hat.data.clone(),
        }
    };
    report.wall_time = started.elapsed().as_secs_f64();
    Ok((LambdaMatrix::new(result, bag_ids(stats))?, report))
}
