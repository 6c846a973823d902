//! Toy training loop: one MoE layer with a residual connection, plain SGD,
//! loss `mean((X + X_out − Y)²)` against cluster-conditional targets.
//!
//! Each step draws a fresh batch from the seeded stream. The recorded loss
//! series is measured on a fixed evaluation batch (the stream's first batch)
//! before training and after every step, so `lr = 0` yields a constant series.

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::prng::derive_seed;
use super::report::{DataEcho, PhaseTimer, RunReport, SolverEcho};
use super::synth::{LabeledBatch, SyntheticSource, SyntheticSpec, ToyTask};
use crate::error::{Error, Result};
use crate::metrics::{cap_violations, compute_stats};
use crate::moe::{backward_with_affinity_grad, forward, init_params, MoEParams};
use crate::routing::{aux_balance_loss, Router, RouterConfig};
use crate::tensor::Matrix;

/// Shape of the synthetic training stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainData {
    pub tokens: usize,
    pub clusters: usize,
    pub skew: f64,
}

impl Default for TrainData {
    fn default() -> Self {
        Self { tokens: 64, clusters: 8, skew: 1.0 }
    }
}

fn task_loss(
    params: &MoEParams,
    router: &Router,
    cfg: &RouterConfig,
    batch: &LabeledBatch,
    targets: &Matrix,
) -> Result<(f64, Matrix, crate::moe::MoEForwardTrace)> {
    let trace = forward(&batch.batch, params, router, cfg)?;
    let x = &batch.batch.x;
    let count = (x.rows() * x.cols()) as f64;
    let mut diff = Matrix::zeros(x.rows(), x.cols());
    let mut loss = 0.0;
    for ((d, (&xv, &ov)), &yv) in
        diff.as_mut_slice().iter_mut().zip(x.as_slice().iter().zip(trace.x_out.as_slice())).zip(targets.as_slice())
    {
        *d = xv + ov - yv;
        loss += *d * *d;
    }
    Ok((loss / count, diff, trace))
}

fn diverged(step: usize, loss: f64, losses: &[f64]) -> Error {
    Error::Diverged { step, loss, losses: losses.to_vec() }
}

/// Trains a fresh layer for `config.steps` SGD steps. Token-choice routers
/// add the balancing loss with weight `config.aux_loss_weight`.
pub fn train_toy(config: &RunConfig, data: &TrainData, record_time: bool) -> Result<RunReport> {
    let mut timer = PhaseTimer::new(record_time);
    let spec = SyntheticSpec {
        n: data.tokens,
        d: config.d_model,
        clusters: data.clusters,
        skew: data.skew,
        seed: config.seed,
    };
    let router = config.router();
    let cfg = RouterConfig::new(config.experts, config.capacity_factor, data.tokens)?;
    cfg.k()?;
    let mut source = SyntheticSource::new(spec)?;
    let task = ToyTask::new(config.seed, data.clusters, config.d_model)?;
    let mut params = init_params(derive_seed(config.seed, 2), config.d_model, config.d_hidden, config.experts)?;

    let eval = source.next_batch();
    let eval_targets = task.targets(&eval);
    let eval_loss = |params: &MoEParams, step: usize, losses: &[f64]| -> Result<f64> {
        match task_loss(params, &router, &cfg, &eval, &eval_targets) {
            Ok((l, _, _)) if l.is_finite() => Ok(l),
            Ok((l, _, _)) => Err(diverged(step, l, losses)),
            Err(Error::NonFinite(_)) => Err(diverged(step, f64::NAN, losses)),
            Err(e) => Err(e),
        }
    };

    let mut losses = Vec::with_capacity(config.steps + 1);
    losses.push(timer.time("eval", || eval_loss(&params, 0, &[]))?);

    for step in 1..=config.steps {
        let batch = source.next_batch();
        let targets = task.targets(&batch);
        let result = timer.time("train", || -> Result<()> {
            let (_, diff, trace) = task_loss(&params, &router, &cfg, &batch, &targets)?;
            let scale = 2.0 / diff.as_slice().len() as f64;
            let grad_out = diff.map(|v| v * scale);
            let aux = match (&trace.token_choice, config.aux_loss_weight > 0.0) {
                (Some(tc), true) => {
                    let tc = tc.to_result(&trace.assignment);
                    Some(aux_balance_loss(&trace.s, &tc, config.aux_loss_weight).1)
                }
                _ => None,
            };
            let grads = backward_with_affinity_grad(&trace, &batch.batch, &params, &grad_out, aux.as_ref())?;
            params.sgd_step(&grads, config.lr);
            Ok(())
        });
        match result {
            Ok(()) if params.is_finite() => {}
            Ok(()) | Err(Error::NonFinite(_)) => return Err(diverged(step, f64::NAN, &losses)),
            Err(e) => return Err(e),
        }
        let l = timer.time("eval", || eval_loss(&params, step, &losses))?;
        losses.push(l);
    }

    let final_trace = forward(&eval.batch, &params, &router, &cfg)?;
    let mut report = RunReport::new(
        "train",
        config.clone(),
        DataEcho {
            input: None,
            n: data.tokens,
            d: config.d_model,
            clusters: Some(data.clusters),
            skew: Some(data.skew),
            data_seed: Some(config.seed),
        },
    );
    let stats = match &final_trace.token_choice {
        Some(tc) => compute_stats(crate::metrics::StatsInput::TokenChoice(&final_trace.assignment, tc), &cfg),
        None => compute_stats(&final_trace.assignment, &cfg),
    };
    report.stats = Some(stats);
    report.solver =
        final_trace.solver.as_ref().map(|s| SolverEcho::new(s, cap_violations(&final_trace.assignment, config.cap_b)));
    report.final_loss = losses.last().copied();
    report.losses = losses;
    report.timings_ms = timer.finish();
    Ok(report)
}
