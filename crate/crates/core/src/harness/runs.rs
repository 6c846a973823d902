//! Single-batch routing runs shared by the `route`, `compare` and
//! `solve-capped` subcommands.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{RouterKind, RunConfig};
use super::prng::{derive_seed, Prng};
use super::report::{DataEcho, PhaseTimer, RunReport, SolverEcho};
use super::synth::random_affinity;
use crate::capped::{capped_route, CappedSolution, Residuals};
use crate::error::Result;
use crate::metrics::{cap_violations, compute_stats, LoadStats};
use crate::moe::init_params;
use crate::routing::{affinity, RouterConfig, TokenBatch};

/// Routes `batch` once with the router named in `config`. The gating
/// embedding comes from `init_params(config.seed, ..)`.
pub fn route_report(batch: &TokenBatch, config: &RunConfig, data: DataEcho, record_time: bool) -> Result<RunReport> {
    let mut timer = PhaseTimer::new(record_time);
    let cfg = RouterConfig::new(config.experts, config.capacity_factor, batch.len())?;
    let params = init_params(config.seed, batch.dim(), config.d_hidden, config.experts)?;
    let s = timer.time("affinity", || affinity(batch, &params.w_g))?;
    let router = config.router();
    let ids = batch.token_ids();
    let outcome = timer.time("route", || router.route(&s, &cfg, &ids))?;
    let mut report = RunReport::new("route", config.clone(), data);
    report.stats = Some(compute_stats(&outcome, &cfg));
    report.solver =
        outcome.solver.as_ref().map(|sol| SolverEcho::new(sol, cap_violations(&outcome.assignment, config.cap_b)));
    report.timings_ms = timer.finish();
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub routers: Vec<RouterKind>,
    pub reports: Vec<RunReport>,
}

/// One [`route_report`] per router on the same batch. Runs in parallel;
/// reports keep the order of `routers`.
pub fn compare_reports(
    batch: &TokenBatch,
    base: &RunConfig,
    routers: &[RouterKind],
    data: &DataEcho,
    record_time: bool,
) -> Result<CompareReport> {
    let reports = routers
        .par_iter()
        .map(|&router| {
            let cfg = RunConfig { router, ..base.clone() };
            route_report(batch, &cfg, data.clone(), record_time)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CompareReport { routers: routers.to_vec(), reports })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub config: RunConfig,
    pub tokens: usize,
    pub bucket_size: usize,
    pub iterations_used: usize,
    pub residuals: Residuals,
    pub converged: bool,
    pub residual_history: Vec<Residuals>,
    pub cap_violations: usize,
    /// Share of `A` entries within 0.05 of 0 or 1.
    pub near_integral_fraction: f64,
    pub stats: LoadStats,
}

pub fn near_integral_fraction(sol: &CappedSolution) -> f64 {
    let a = sol.a.as_slice();
    a.iter().filter(|&&v| !(0.05..=0.95).contains(&v)).count() as f64 / a.len() as f64
}

/// Solves one random capped instance with `tokens` tokens. Affinities are a
/// softmax of standard-normal logits drawn from `derive_seed(seed, 3)`.
pub fn solve_capped_report(config: &RunConfig, tokens: usize) -> Result<SolveReport> {
    let cfg = RouterConfig::new(config.experts, config.capacity_factor, tokens)?;
    let k = cfg.k()?;
    let mut prng = Prng::new(derive_seed(config.seed, 3));
    let s = random_affinity(&mut prng, tokens, config.experts, 1.0);
    let (assignment, sol) = capped_route(&s, k, &config.capped_options())?;
    Ok(SolveReport {
        config: RunConfig { router: RouterKind::Capped, ..config.clone() },
        tokens,
        bucket_size: k,
        iterations_used: sol.iterations_used,
        converged: sol.residuals.max() < config.tol,
        residuals: sol.residuals,
        near_integral_fraction: near_integral_fraction(&sol),
        residual_history: sol.history.clone(),
        cap_violations: cap_violations(&assignment, config.cap_b),
        stats: compute_stats(&assignment, &cfg),
    })
}
