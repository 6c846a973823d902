//! Gated-FFN mixture-of-experts layer.
//!
//! Forward:
//!
//! ```text
//! S      = softmax(X·W_g)                       n × e
//! (G, I) = router(S)                            e × k
//! X_in[i]  = rows I[i,·] of X                   k × d
//! X_e[i]   = GeLU(X_in[i]·W1[i]) · W2[i]ᵀ       k × d
//! X_out[l] = Σ_{(i,j): I[i,j]=l} G[i,j]·X_e[i,j]
//! ```
//!
//! Backward treats `I` as a constant of the forward pass; gradients reach
//! `W_g` only through the gate values.

use crate::capped::CappedSolution;
use crate::error::{Error, Result};
use crate::harness::Prng;
use crate::routing::{
    self, GateRule, RouteOutcome, Router, RouterConfig, RoutingAssignment, TokenBatch, TokenChoiceSummary,
};
use crate::tensor::{gelu, gelu_grad, matmul, matmul_nt, matmul_tn, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct MoEParams {
    /// Expert embeddings, `d × e`.
    pub w_g: Matrix,
    /// Per-expert input projections, each `d × d_hidden`.
    pub w1: Vec<Matrix>,
    /// Per-expert output projections, each `d × d_hidden` (applied transposed).
    pub w2: Vec<Matrix>,
}

impl MoEParams {
    pub fn new(w_g: Matrix, w1: Vec<Matrix>, w2: Vec<Matrix>) -> Result<Self> {
        let (d, e) = w_g.shape();
        if w1.len() != e || w2.len() != e {
            return Err(Error::DimensionMismatch {
                op: "MoEParams::new",
                detail: format!("{e} experts but {} W1 / {} W2", w1.len(), w2.len()),
            });
        }
        let dh = w1.first().map_or(0, Matrix::cols);
        if w1.iter().chain(&w2).any(|m| m.shape() != (d, dh)) {
            return Err(Error::DimensionMismatch {
                op: "MoEParams::new",
                detail: format!("every expert matrix must be {d}x{dh}"),
            });
        }
        Ok(Self { w_g, w1, w2 })
    }

    pub fn d_model(&self) -> usize {
        self.w_g.rows()
    }

    pub fn d_hidden(&self) -> usize {
        self.w1[0].cols()
    }

    pub fn num_experts(&self) -> usize {
        self.w_g.cols()
    }

    /// `self -= lr · grads`
    pub fn sgd_step(&mut self, grads: &MoEGrads, lr: f64) {
        axpy(&mut self.w_g, &grads.w_g, -lr);
        for (w, g) in self.w1.iter_mut().zip(&grads.w1) {
            axpy(w, g, -lr);
        }
        for (w, g) in self.w2.iter_mut().zip(&grads.w2) {
            axpy(w, g, -lr);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w_g.is_finite() && self.w1.iter().chain(&self.w2).all(Matrix::is_finite)
    }
}

fn axpy(y: &mut Matrix, x: &Matrix, alpha: f64) {
    for (a, b) in y.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *a += alpha * b;
    }
}

/// Glorot-uniform init. Matrices are drawn in the order `W_g`, then
/// `W1[i]`, `W2[i]` for each expert, all from one splitmix64 stream.
pub fn init_params(seed: u64, d: usize, d_hidden: usize, e: usize) -> Result<MoEParams> {
    if d == 0 || d_hidden == 0 || e == 0 {
        return Err(Error::InvalidArgument("parameter dims must be >= 1".into()));
    }
    let mut prng = Prng::new(seed);
    let mut draw = |rows: usize, cols: usize, fan_in: usize, fan_out: usize| {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Matrix::from_fn(rows, cols, |_, _| prng.uniform(-limit, limit))
    };
    let w_g = draw(d, e, d, e)?;
    let mut w1 = Vec::with_capacity(e);
    let mut w2 = Vec::with_capacity(e);
    for _ in 0..e {
        w1.push(draw(d, d_hidden, d, d_hidden)?);
        w2.push(draw(d, d_hidden, d_hidden, d)?);
    }
    MoEParams::new(w_g, w1, w2)
}

/// Everything the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct MoEForwardTrace {
    pub s: Matrix,
    pub assignment: RoutingAssignment,
    pub token_choice: Option<TokenChoiceSummary>,
    pub solver: Option<CappedSolution>,
    /// Gathered inputs per expert, `k × d` (padding rows are zero).
    pub x_in: Vec<Matrix>,
    /// Pre-activation `X_in[i]·W1[i]`, `k × d_hidden`.
    pub h: Vec<Matrix>,
    /// `GeLU(h)`
    pub act: Vec<Matrix>,
    /// Expert outputs, `k × d`.
    pub x_e: Vec<Matrix>,
    pub x_out: Matrix,
}

/// `X_in[i][j] = X[I[i][j]]`; padding slots gather a zero row.
pub fn gather(x: &Matrix, assignment: &RoutingAssignment) -> Vec<Matrix> {
    let (k, d) = (assignment.slots(), x.cols());
    (0..assignment.num_experts())
        .map(|i| {
            let mut m = Matrix::zeros(k, d);
            for j in 0..k {
                if !assignment.is_padding(i, j) {
                    m.row_mut(j).copy_from_slice(x.row(assignment.indices.get(i, j)));
                }
            }
            m
        })
        .collect()
}

/// `X_out[l] = Σ G[i][j]·X_e[i][j]` over slots holding token `l`, summed in
/// `(i, j)` order.
pub fn combine(assignment: &RoutingAssignment, gates: &Matrix, x_e: &[Matrix], d: usize) -> Matrix {
    let mut out = Matrix::zeros(assignment.num_tokens, d);
    for (i, xe) in x_e.iter().enumerate() {
        for j in 0..assignment.slots() {
            if assignment.is_padding(i, j) {
                continue;
            }
            let g = gates.get(i, j);
            let dst = out.row_mut(assignment.indices.get(i, j));
            for (o, &v) in dst.iter_mut().zip(xe.row(j)) {
                *o += g * v;
            }
        }
    }
    out
}

/// Routes with `router`, then runs the expert FFNs and combine.
pub fn forward(x: &TokenBatch, params: &MoEParams, router: &Router, cfg: &RouterConfig) -> Result<MoEForwardTrace> {
    check_batch(x, params, cfg)?;
    let s = routing::affinity(x, &params.w_g)?;
    let outcome = router.route(&s, cfg, &x.token_ids())?;
    run_experts(x, params, s, outcome)
}

/// Forward pass with a fixed slot table. Gates are recomputed from the
/// current `S` through `assignment.rule`.
pub fn forward_pinned(x: &TokenBatch, params: &MoEParams, assignment: &RoutingAssignment) -> Result<MoEForwardTrace> {
    if assignment.num_tokens != x.len() || assignment.num_experts() != params.num_experts() {
        return Err(Error::DimensionMismatch {
            op: "forward_pinned",
            detail: format!(
                "assignment is for {} tokens / {} experts, batch has {} tokens, params {} experts",
                assignment.num_tokens,
                assignment.num_experts(),
                x.len(),
                params.num_experts()
            ),
        });
    }
    let s = routing::affinity(x, &params.w_g)?;
    let mut assignment = assignment.clone();
    assignment.gates = assignment.gates_from(&s)?;
    run_experts(x, params, s, RouteOutcome { assignment, token_choice: None, solver: None })
}

fn check_batch(x: &TokenBatch, params: &MoEParams, cfg: &RouterConfig) -> Result<()> {
    if x.dim() != params.d_model() || x.len() != cfg.tokens || cfg.num_experts != params.num_experts() {
        return Err(Error::DimensionMismatch {
            op: "moe::forward",
            detail: format!(
                "batch {}x{}, params d={} e={}, config n={} e={}",
                x.len(),
                x.dim(),
                params.d_model(),
                params.num_experts(),
                cfg.tokens,
                cfg.num_experts
            ),
        });
    }
    Ok(())
}

fn run_experts(x: &TokenBatch, params: &MoEParams, s: Matrix, outcome: RouteOutcome) -> Result<MoEForwardTrace> {
    let RouteOutcome { assignment, token_choice, solver } = outcome;
    let x_in = gather(&x.x, &assignment);
    let mut h = Vec::with_capacity(x_in.len());
    let mut act = Vec::with_capacity(x_in.len());
    let mut x_e = Vec::with_capacity(x_in.len());
    for (i, xi) in x_in.iter().enumerate() {
        let hi = matmul(xi, &params.w1[i])?;
        let ai = hi.map(gelu);
        x_e.push(matmul_nt(&ai, &params.w2[i])?);
        h.push(hi);
        act.push(ai);
    }
    let x_out = combine(&assignment, &assignment.gates, &x_e, x.dim()).check_finite("moe combine")?;
    Ok(MoEForwardTrace { s, assignment, token_choice, solver, x_in, h, act, x_e, x_out })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoEGrads {
    pub x: Matrix,
    pub w_g: Matrix,
    pub w1: Vec<Matrix>,
    pub w2: Vec<Matrix>,
}

/// Reverse-mode gradients of a scalar loss given `∂L/∂X_out`.
pub fn backward(trace: &MoEForwardTrace, x: &TokenBatch, params: &MoEParams, grad_out: &Matrix) -> Result<MoEGrads> {
    backward_with_affinity_grad(trace, x, params, grad_out, None)
}

/// As [`backward`], with an extra `∂L/∂S` term (e.g. a balancing loss).
pub fn backward_with_affinity_grad(
    trace: &MoEForwardTrace,
    x: &TokenBatch,
    params: &MoEParams,
    grad_out: &Matrix,
    extra_grad_s: Option<&Matrix>,
) -> Result<MoEGrads> {
    let a = &trace.assignment;
    let (n, d) = x.x.shape();
    let e = params.num_experts();
    if grad_out.shape() != (n, d)
        || trace.x_out.shape() != (n, d)
        || trace.s.shape() != (n, e)
        || a.num_experts() != e
        || trace.x_in.len() != e
        || extra_grad_s.is_some_and(|g| g.shape() != (n, e))
    {
        return Err(Error::DimensionMismatch { op: "moe::backward", detail: "trace does not match inputs".into() });
    }
    if let Some((i, j)) = (0..e).flat_map(|i| (0..a.slots()).map(move |j| (i, j))).find(|&(i, j)| !a.is_padding(i, j)) {
        if trace.x_in[i].row(j) != x.x.row(a.indices.get(i, j)) {
            return Err(Error::InvalidArgument("trace was produced from a different batch".into()));
        }
    }

    let k = a.slots();
    let mut grad_s = match extra_grad_s {
        Some(g) => g.clone(),
        None => Matrix::zeros(n, e),
    };
    let mut grad_x = Matrix::zeros(n, d);
    let mut grad_w1 = Vec::with_capacity(e);
    let mut grad_w2 = Vec::with_capacity(e);

    for i in 0..e {
        // combine
        let mut d_xe = Matrix::zeros(k, d);
        for j in 0..k {
            if a.is_padding(i, j) {
                continue;
            }
            let t = a.indices.get(i, j);
            let go = grad_out.row(t);
            let dg: f64 = go.iter().zip(trace.x_e[i].row(j)).map(|(p, q)| p * q).sum();
            let g = a.gates.get(i, j);
            for (dst, &v) in d_xe.row_mut(j).iter_mut().zip(go) {
                *dst = g * v;
            }
            match &a.rule {
                GateRule::Affinity => grad_s.set(t, i, grad_s.get(t, i) + dg),
                GateRule::AffinityPooled { partners } => {
                    grad_s.set(t, i, grad_s.get(t, i) + dg);
                    if let Some(p) = partners[i * k + j] {
                        grad_s.set(t, p, grad_s.get(t, p) + dg);
                    }
                }
                GateRule::Unit => {}
            }
        }
        // x_e = act · W2ᵀ
        grad_w2.push(matmul_tn(&d_xe, &trace.act[i])?);
        let mut d_h = matmul(&d_xe, &params.w2[i])?;
        for (dh, &hv) in d_h.as_mut_slice().iter_mut().zip(trace.h[i].as_slice()) {
            *dh *= gelu_grad(hv);
        }
        // h = x_in · W1
        grad_w1.push(matmul_tn(&trace.x_in[i], &d_h)?);
        let d_xin = matmul_nt(&d_h, &params.w1[i])?;
        for j in 0..k {
            if a.is_padding(i, j) {
                continue;
            }
            let dst = grad_x.row_mut(a.indices.get(i, j));
            for (o, &v) in dst.iter_mut().zip(d_xin.row(j)) {
                *o += v;
            }
        }
    }

    // softmax: dz = S ⊙ (dS − ⟨dS, S⟩_row)
    let mut d_logits = Matrix::zeros(n, e);
    for t in 0..n {
        let srow = trace.s.row(t);
        let grow = grad_s.row(t);
        let dot: f64 = srow.iter().zip(grow).map(|(p, q)| p * q).sum();
        for (dz, (&sv, &gv)) in d_logits.row_mut(t).iter_mut().zip(srow.iter().zip(grow)) {
            *dz = sv * (gv - dot);
        }
    }
    let grad_wg = matmul_tn(&x.x, &d_logits)?;
    let gx_route = matmul_nt(&d_logits, &params.w_g)?;
    for (o, v) in grad_x.as_mut_slice().iter_mut().zip(gx_route.as_slice()) {
        *o += v;
    }

    Ok(MoEGrads { x: grad_x.check_finite("moe backward")?, w_g: grad_wg, w1: grad_w1, w2: grad_w2 })
}
