//! Capped expert choice.
//!
//! Solves
//!
//! ```text
//! max_A  <Sᵀ, A> + λ·H(A)
//! s.t.   Σ_j A[i,j] = k      (every expert takes k tokens)
//!        Σ_i A[i,j] ≤ b      (a token is shared by at most b experts)
//!        0 ≤ A[i,j] ≤ 1
//! ```
//!
//! which is the KL projection of `exp(Sᵀ/λ)` onto the intersection of the
//! constraint sets. Dykstra's algorithm with Bregman (KL) projections cycles
//! through the sets. Every projection is a capped multiplicative rescaling,
//! so the solver keeps dual potentials instead of `A` itself; this survives
//! `1/λ = 1000` without overflow.
//!
//! At λ = 1e-3 plain cycling moves each potential by about `λ·ln 2` per
//! cycle, so λ is annealed from the score spread down to its target and the
//! updates are over-relaxed. Residuals still need not reach `tol` within 100
//! cycles on tight instances; they are reported as they are.
//!
//! The routing indices are then `TopK(A, k)` per expert.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::{GateRule, RoutingAssignment};
use crate::tensor::{self, IndexMatrix, Matrix};

pub const DEFAULT_LAMBDA: f64 = 1e-3;
pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-3;

/// Solver knobs for the capped router.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CappedOptions {
    pub cap_b: usize,
    pub lambda: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl CappedOptions {
    pub fn with_cap(cap_b: usize) -> Self {
        Self { cap_b, lambda: DEFAULT_LAMBDA, max_iters: DEFAULT_MAX_ITERS, tol: DEFAULT_TOL }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CappedProblem {
    /// `Sᵀ`, experts × tokens.
    pub scores: Matrix,
    pub row_budget: usize,
    pub token_cap: usize,
    pub lambda: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl CappedProblem {
    pub fn new(scores: Matrix, row_budget: usize, opts: &CappedOptions) -> Self {
        Self {
            scores,
            row_budget,
            token_cap: opts.cap_b,
            lambda: opts.lambda,
            max_iters: opts.max_iters,
            tol: opts.tol,
        }
    }

    fn validate(&self) -> Result<()> {
        let (e, n) = self.scores.shape();
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(Error::InvalidArgument(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.token_cap == 0 || self.token_cap > e {
            return Err(Error::InvalidArgument(format!("cap b = {} must be in 1..={e}", self.token_cap)));
        }
        if self.row_budget == 0 || self.row_budget > n {
            return Err(Error::CapacityExceedsBatch { k: self.row_budget, n });
        }
        let (demand, supply) = (e * self.row_budget, n * self.token_cap);
        if demand > supply {
            return Err(Error::Infeasible { demand, supply });
        }
        Ok(())
    }
}

/// Constraint violations of an iterate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// `max_i |Σ_j A[i,j] − k|`
    pub row_eq: f64,
    /// `max(0, max_j Σ_i A[i,j] − b)`
    pub col_ineq: f64,
    /// `max(0, max A − 1, −min A)`
    #[serde(rename = "box")]
    pub box_: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.row_eq.max(self.col_ineq).max(self.box_)
    }

    pub fn of(a: &Matrix, k: usize, b: usize) -> Self {
        let (e, n) = a.shape();
        let mut col = vec![0.0; n];
        let mut row_eq: f64 = 0.0;
        let mut box_: f64 = 0.0;
        for i in 0..e {
            let row = a.row(i);
            row_eq = row_eq.max((row.iter().sum::<f64>() - k as f64).abs());
            for (c, &v) in col.iter_mut().zip(row) {
                *c += v;
                box_ = box_.max(v - 1.0).max(-v);
            }
        }
        let col_ineq = col.iter().map(|&c| c - b as f64).fold(0.0, f64::max);
        Self { row_eq, col_ineq, box_ }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CappedSolution {
    /// Relaxed selection matrix, experts × tokens, entries in `[0, 1]`.
    pub a: Matrix,
    pub iterations_used: usize,
    pub residuals: Residuals,
    /// Residuals after each full projection cycle.
    pub history: Vec<Residuals>,
}

/// Over-relaxation factor for the potential updates.
const RELAXATION: f64 = 1.5;
/// Share of the cycle budget spent annealing λ down to its target.
const ANNEAL_SHARE: f64 = 0.3;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    a.max(b) + (-(a - b).abs()).exp().ln_1p()
}

/// Returns `τ` with `Σ_j min(1, exp(l_j + τ)) = budget`. Sorts `l`
/// descending in place and uses `suffix` as scratch.
fn capped_shift(l: &mut [f64], budget: usize, suffix: &mut Vec<f64>) -> f64 {
    l.sort_unstable_by(|a, b| b.total_cmp(a));
    let n = l.len();
    suffix.clear();
    suffix.resize(n + 1, f64::NEG_INFINITY);
    for j in (0..n).rev() {
        suffix[j] = log_add(suffix[j + 1], l[j]);
    }
    let top = budget.min(n);
    // the m largest entries sit at 1, the rest are scaled
    for m in 0..top {
        let tau = ((budget - m) as f64).ln() - suffix[m];
        if l[m] + tau <= 1e-12 && (m == 0 || l[m - 1] + tau >= -1e-12) {
            return tau;
        }
    }
    -l[top - 1]
}

/// Dual potentials in score units: `A[i,j] = min(1, exp((Sᵀ[i,j] + row[i] + col[j]) / λ))`.
///
/// The box is folded into both other sets, so each projection is an exact
/// KL projection onto {row sums = k, A ≤ 1} or {column sums ≤ b, A ≤ 1}.
/// With Dykstra's corrections these reduce to updating one block of
/// potentials; `col ≤ 0` carries the inequality.
struct Potentials {
    row: Vec<f64>,
    col: Vec<f64>,
    buf: Vec<f64>,
    suffix: Vec<f64>,
}

impl Potentials {
    fn project_rows(&mut self, st: &Matrix, lambda: f64, k: usize, omega: f64) {
        for (i, r) in self.row.iter_mut().enumerate() {
            self.buf.clear();
            self.buf.extend(st.row(i).iter().zip(&self.col).map(|(&s, &c)| (s + c + *r) / lambda));
            let target = *r + lambda * capped_shift(&mut self.buf, k, &mut self.suffix);
            *r += omega * (target - *r);
        }
    }

    fn project_cols(&mut self, st: &Matrix, lambda: f64, b: usize, omega: f64) {
        let e = st.rows();
        for (j, c) in self.col.iter_mut().enumerate() {
            self.buf.clear();
            self.buf.extend((0..e).map(|i| (st.get(i, j) + self.row[i] + *c) / lambda));
            let target = (*c + lambda * capped_shift(&mut self.buf, b, &mut self.suffix)).min(0.0);
            *c = (*c + omega * (target - *c)).min(0.0);
        }
    }

    fn plan(&self, st: &Matrix, lambda: f64) -> Matrix {
        let n = st.cols();
        let data = st
            .as_slice()
            .iter()
            .enumerate()
            .map(|(idx, &s)| ((s + self.row[idx / n] + self.col[idx % n]) / lambda).exp().min(1.0))
            .collect();
        Matrix::from_vec(st.rows(), n, data).expect("finite potentials")
    }
}

/// λ used in cycle `t`. Starts at the score spread and decays geometrically
/// to the target over the first part of the budget.
fn lambda_schedule(start: f64, target: f64, max_iters: usize) -> impl Fn(usize) -> f64 {
    let anneal = ((max_iters as f64 * ANNEAL_SHARE) as usize).max(1);
    let ratio = (target / start).powf(1.0 / anneal as f64);
    move |t| if t >= anneal { target } else { (start * ratio.powi(t as i32)).max(target) }
}

/// Runs at most `max_iters` cycles of alternating KL projections (rows,
/// then columns). Hitting the budget is not an error; the final residuals
/// are reported either way.
pub fn solve_capped(p: &CappedProblem) -> Result<CappedSolution> {
    p.validate()?;
    let st = &p.scores;
    let (e, n) = st.shape();

    let (lo, hi) = st.as_slice().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let start = (hi - lo).max(p.lambda);
    let schedule = lambda_schedule(start, p.lambda, p.max_iters);

    let mut pot = Potentials { row: vec![0.0; e], col: vec![0.0; n], buf: Vec::new(), suffix: Vec::new() };
    let mut lambda = schedule(0);
    pot.project_rows(st, lambda, p.row_budget, 1.0);

    let mut history = Vec::with_capacity(p.max_iters);
    let mut a = pot.plan(st, lambda);
    let mut residuals = Residuals::of(&a, p.row_budget, p.token_cap);
    let mut iterations_used = 0;

    while iterations_used < p.max_iters && (residuals.max() >= p.tol || lambda > p.lambda) {
        iterations_used += 1;
        lambda = schedule(iterations_used);
        pot.project_rows(st, lambda, p.row_budget, RELAXATION);
        pot.project_cols(st, lambda, p.token_cap, RELAXATION);
        a = pot.plan(st, lambda);
        residuals = Residuals::of(&a, p.row_budget, p.token_cap);
        history.push(residuals);
    }

    Ok(CappedSolution { a, iterations_used, residuals, history })
}

/// Capped expert-choice routing. The solver's `A` picks each expert's token
/// set (ties in `A` resolved by affinity, then index). Within a row tokens
/// are ordered by affinity, and gates are the original affinities.
pub fn capped_route(s: &Matrix, k: usize, opts: &CappedOptions) -> Result<(RoutingAssignment, CappedSolution)> {
    let st = tensor::transpose(s);
    let problem = CappedProblem::new(st, k, opts);
    let solution = solve_capped(&problem)?;
    let st = &problem.scores;
    let (e, n) = st.shape();
    let mut flat = Vec::with_capacity(e * k);
    let mut gates = Vec::with_capacity(e * k);
    for i in 0..e {
        let a_row = solution.a.row(i);
        let s_row = st.row(i);
        let mut chosen = tensor::topk_indices_by(n, k, |x, y| {
            a_row[y].total_cmp(&a_row[x]).then(s_row[y].total_cmp(&s_row[x])).then(x.cmp(&y))
        })?;
        chosen.sort_unstable_by(|&x, &y| tensor::rank_order(s_row, x, y));
        gates.extend(chosen.iter().map(|&t| s_row[t]));
        flat.extend(chosen);
    }
    let assignment = RoutingAssignment {
        indices: IndexMatrix::from_vec(e, k, n, flat)?,
        gates: Matrix::from_vec(e, k, gates)?,
        num_tokens: n,
        rule: GateRule::Affinity,
    };
    Ok((assignment, solution))
}
