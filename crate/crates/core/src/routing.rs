//! Token-to-expert routers. Every router produces a [`RoutingAssignment`]:
//! an `e × k` slot table of token ids plus matching gate weights.
//!
//! * expert choice: each expert takes its top-`k` tokens by affinity
//! * token choice (top-1 / top-2): each token claims its best experts, first
//!   come first served up to the bucket size `k`
//! * hash: token id modulo `e`, no bucket limit

use serde::{Deserialize, Serialize};

use crate::capped::{self, CappedOptions, CappedSolution};
use crate::error::{Error, Result};
use crate::tensor::{self, matmul, softmax_rows, IndexMatrix, Matrix};

/// Number of experts, capacity factor and batch size for one routing call.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub num_experts: usize,
    pub capacity_factor: f64,
    pub tokens: usize,
}

impl RouterConfig {
    pub fn new(num_experts: usize, capacity_factor: f64, tokens: usize) -> Result<Self> {
        if num_experts == 0 || tokens == 0 {
            return Err(Error::InvalidArgument("experts and tokens must be >= 1".into()));
        }
        if !(capacity_factor > 0.0 && capacity_factor.is_finite()) {
            return Err(Error::InvalidArgument(format!("capacity factor {capacity_factor} must be > 0")));
        }
        Ok(Self { num_experts, capacity_factor, tokens })
    }

    /// Bucket size per expert.
    pub fn k(&self) -> Result<usize> {
        capacity(self.tokens, self.capacity_factor, self.num_experts)
    }
}

/// Expert bucket size `k = n·c/e`, rounded half-up and floored at 1.
pub fn capacity(n: usize, c: f64, e: usize) -> Result<usize> {
    if n == 0 || e == 0 || !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidArgument(format!("capacity(n={n}, c={c}, e={e})")));
    }
    let k = ((n as f64 * c / e as f64) + 0.5).floor().max(1.0) as usize;
    if k > n {
        return Err(Error::CapacityExceedsBatch { k, n });
    }
    Ok(k)
}

/// Token representations plus optional integer ids (used by the hash router).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub x: Matrix,
    pub ids: Option<Vec<u32>>,
}

impl TokenBatch {
    pub fn new(x: Matrix) -> Self {
        Self { x, ids: None }
    }

    pub fn with_ids(x: Matrix, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != x.rows() {
            return Err(Error::DimensionMismatch {
                op: "TokenBatch::with_ids",
                detail: format!("{} ids for {} tokens", ids.len(), x.rows()),
            });
        }
        Ok(Self { x, ids: Some(ids) })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Token ids, defaulting to positions when the batch carries none.
    pub fn token_ids(&self) -> Vec<u32> {
        match &self.ids {
            Some(ids) => ids.clone(),
            None => (0..self.len() as u32).collect(),
        }
    }
}

/// `S = softmax(X·W_g)`, shape `n × e`.
pub fn affinity(x: &TokenBatch, w_g: &Matrix) -> Result<Matrix> {
    affinity_from_logits(&logits(x, w_g)?)
}

pub fn logits(x: &TokenBatch, w_g: &Matrix) -> Result<Matrix> {
    if x.dim() != w_g.rows() {
        return Err(Error::DimensionMismatch {
            op: "affinity",
            detail: format!("tokens have d={}, W_g has {} rows", x.dim(), w_g.rows()),
        });
    }
    matmul(&x.x, w_g)
}

pub fn affinity_from_logits(logits: &Matrix) -> Result<Matrix> {
    softmax_rows(logits)
}

/// How gate values are derived from the affinity matrix. The MoE layer uses
/// this both to recompute gates under pinned routing and to route gradients
/// back into `S`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum GateRule {
    /// `G[i][j] = S[I[i][j]][i]`.
    Affinity,
    /// As `Affinity`, plus `S[I[i][j]][p]` for slots carrying a partner
    /// expert `p` (a top-2 token whose other claim was dropped).
    AffinityPooled { partners: Vec<Option<usize>> },
    /// Every occupied slot has gate 1.
    Unit,
}

/// Slot table shared by all routers. Slot `(i, j)` holds the `j`-th token of
/// expert `i`; unused slots hold the sentinel `num_tokens` with gate 0.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingAssignment {
    pub indices: IndexMatrix,
    pub gates: Matrix,
    pub num_tokens: usize,
    pub rule: GateRule,
}

impl RoutingAssignment {
    pub fn num_experts(&self) -> usize {
        self.indices.rows()
    }

    pub fn slots(&self) -> usize {
        self.indices.cols()
    }

    #[inline]
    pub fn is_padding(&self, i: usize, j: usize) -> bool {
        self.indices.get(i, j) >= self.num_tokens
    }

    /// Tokens held by expert `i`, in slot order, padding excluded.
    pub fn expert_tokens(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let n = self.num_tokens;
        self.indices.row(i).iter().copied().filter(move |&t| t < n)
    }

    /// Number of expert rows each token appears in.
    pub fn token_multiplicity(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_tokens];
        for i in 0..self.num_experts() {
            for t in self.expert_tokens(i) {
                counts[t] += 1;
            }
        }
        counts
    }

    /// Gate values implied by `rule` for affinity matrix `s` (n × e).
    pub fn gates_from(&self, s: &Matrix) -> Result<Matrix> {
        let (e, k) = (self.num_experts(), self.slots());
        if s.rows() != self.num_tokens || s.cols() != e {
            return Err(Error::DimensionMismatch {
                op: "RoutingAssignment::gates_from",
                detail: format!("S is {}x{}, assignment expects {}x{e}", s.rows(), s.cols(), self.num_tokens),
            });
        }
        let mut g = Matrix::zeros(e, k);
        for i in 0..e {
            for j in 0..k {
                if self.is_padding(i, j) {
                    continue;
                }
                let t = self.indices.get(i, j);
                let v = match &self.rule {
                    GateRule::Affinity => s.get(t, i),
                    GateRule::AffinityPooled { partners } => {
                        s.get(t, i) + partners[i * k + j].map_or(0.0, |p| s.get(t, p))
                    }
                    GateRule::Unit => 1.0,
                };
                g.set(i, j, v);
            }
        }
        Ok(g)
    }
}

/// Expert-choice routing: row `i` of `(G, I)` is the top-`k` of column `i`
/// of `S`.
pub fn expert_choice_route(s: &Matrix, k: usize) -> Result<RoutingAssignment> {
    let n = s.rows();
    if k > n {
        return Err(Error::CapacityExceedsBatch { k, n });
    }
    let e = s.cols();
    let rows = column_topk(s, k)?;
    let gates: Vec<f64> = rows.iter().enumerate().flat_map(|(i, r)| r.iter().map(move |&t| s.get(t, i))).collect();
    Ok(RoutingAssignment {
        indices: IndexMatrix::from_vec(e, k, n, rows.concat())?,
        gates: Matrix::from_vec(e, k, gates)?,
        num_tokens: n,
        rule: GateRule::Affinity,
    })
}

/// Rows sampled to estimate each column's top-k threshold.
const THRESHOLD_SAMPLE: usize = 256;

/// Top-`k` tokens of every column of `s`, each ordered by
/// `(value desc, index asc)`.
///
/// A fixed row sample gives each column a key low enough that, almost
/// always, at least `k` entries reach it. One pass over `s` collects those
/// candidates and the exact top-k is selected among them. A column with
/// fewer than `k` candidates falls back to a full selection, so the result
/// always equals [`tensor::topk_indices`] on the column.
fn column_topk(s: &Matrix, k: usize) -> Result<Vec<Vec<usize>>> {
    let (n, e) = s.shape();
    if k == 0 {
        return Ok(vec![Vec::new(); e]);
    }
    let data = s.as_slice();

    let stride = (n / THRESHOLD_SAMPLE).max(1);
    let sampled: Vec<usize> = (0..n).step_by(stride).collect();
    let rank = 2 * (k * sampled.len()).div_ceil(n) + 4;
    let mut sample = Vec::with_capacity(sampled.len());
    let thresholds: Vec<u64> = (0..e)
        .map(|i| {
            if rank >= sampled.len() {
                return 0;
            }
            sample.clear();
            sample.extend(sampled.iter().map(|&t| tensor::order_key(data[t * e + i])));
            *sample.select_nth_unstable_by(rank - 1, |a, b| b.cmp(a)).1
        })
        .collect();

    // (key desc, index asc) packed so plain integer order ranks candidates
    let mut cands: Vec<Vec<u128>> = (0..e).map(|_| Vec::with_capacity(4 * k)).collect();
    for (t, row) in data.chunks_exact(e).enumerate() {
        for ((c, &v), &thr) in cands.iter_mut().zip(row).zip(&thresholds) {
            let key = tensor::order_key(v);
            if key >= thr {
                c.push(((!key as u128) << 64) | t as u128);
            }
        }
    }

    let select = |(i, mut c): (usize, Vec<u128>)| -> Result<Vec<usize>> {
        if c.len() < k {
            let keys: Vec<u64> = (0..n).map(|t| tensor::order_key(data[t * e + i])).collect();
            return tensor::topk_keys(&keys, k, &mut Vec::new());
        }
        if c.len() > k {
            c.select_nth_unstable(k - 1);
        }
        let top = &mut c[..k];
        top.sort_unstable();
        Ok(top.iter().map(|&p| p as u64 as usize).collect())
    };
    if n * e < 1 << 15 {
        cands.into_iter().enumerate().map(select).collect()
    } else {
        use rayon::prelude::*;
        cands.into_par_iter().enumerate().map(select).collect()
    }
}

/// Output of a token-choice router.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenChoiceResult {
    pub assignment: RoutingAssignment,
    pub top_k: usize,
    /// `(token, expert)` claims rejected because the expert's bucket was full.
    pub dropped: Vec<(usize, usize)>,
    /// Claims per expert before capacity truncation.
    pub per_expert_demand: Vec<usize>,
}

/// Token-choice top-1 / top-2 with bucket size `k`. Tokens claim experts in
/// ascending id order; a claim is accepted iff the expert holds fewer than
/// `k` tokens. Top-2 gates of a token that lost one claim absorb the lost
/// expert's probability, so a token's gate mass is always its top-2 mass.
pub fn token_choice_route(s: &Matrix, top_k: usize, k: usize) -> Result<TokenChoiceResult> {
    if !(1..=2).contains(&top_k) {
        return Err(Error::InvalidArgument(format!("token-choice top_k must be 1 or 2, got {top_k}")));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("bucket size k must be >= 1".into()));
    }
    let (n, e) = s.shape();
    if top_k > e {
        return Err(Error::TopKTooLarge { k: top_k, cols: e });
    }
    let mut slots: Vec<Vec<usize>> = vec![Vec::with_capacity(k); e];
    let mut partner_of: Vec<Vec<Option<usize>>> = vec![Vec::with_capacity(k); e];
    let mut demand = vec![0usize; e];
    let mut dropped = Vec::new();

    for t in 0..n {
        let choice = tensor::topk_indices(s.row(t), top_k)?;
        let mut accepted = [false; 2];
        for (c, &ex) in choice.iter().enumerate() {
            demand[ex] += 1;
            if slots[ex].len() < k {
                accepted[c] = true;
            } else {
                dropped.push((t, ex));
            }
        }
        for (c, &ex) in choice.iter().enumerate() {
            if !accepted[c] {
                continue;
            }
            slots[ex].push(t);
            let lost_partner = (top_k == 2 && !accepted[1 - c]).then(|| choice[1 - c]);
            partner_of[ex].push(lost_partner);
        }
    }

    let mut flat = Vec::with_capacity(e * k);
    let mut partners = Vec::with_capacity(e * k);
    for (row, prow) in slots.iter().zip(&partner_of) {
        flat.extend_from_slice(row);
        flat.extend(std::iter::repeat_n(n, k - row.len()));
        partners.extend_from_slice(prow);
        partners.extend(std::iter::repeat_n(None, k - prow.len()));
    }
    let rule = if top_k == 2 { GateRule::AffinityPooled { partners } } else { GateRule::Affinity };
    let mut assignment = RoutingAssignment {
        indices: IndexMatrix::from_vec(e, k, n + 1, flat)?,
        gates: Matrix::zeros(e, k),
        num_tokens: n,
        rule,
    };
    assignment.gates = assignment.gates_from(s)?;
    Ok(TokenChoiceResult { assignment, top_k, dropped, per_expert_demand: demand })
}

/// Hash routing output: ragged per-expert lists and the padded slot view.
#[derive(Clone, Debug, PartialEq)]
pub struct HashRouting {
    pub per_expert: Vec<Vec<usize>>,
    pub assignment: RoutingAssignment,
}

/// Token at position `p` with id `t` goes to expert `t mod e`. Rows of the
/// padded view are as wide as the busiest expert (and at least `k_slots`).
pub fn hash_route(token_ids: &[u32], e: usize, k_slots: usize) -> Result<HashRouting> {
    if token_ids.is_empty() || e == 0 {
        return Err(Error::InvalidArgument("hash routing needs tokens and experts".into()));
    }
    let n = token_ids.len();
    let mut per_expert: Vec<Vec<usize>> = vec![Vec::new(); e];
    for (pos, &id) in token_ids.iter().enumerate() {
        per_expert[id as usize % e].push(pos);
    }
    let width = per_expert.iter().map(Vec::len).max().unwrap_or(0).max(k_slots).max(1);
    let mut flat = Vec::with_capacity(e * width);
    let mut gates = Vec::with_capacity(e * width);
    for row in &per_expert {
        flat.extend_from_slice(row);
        flat.extend(std::iter::repeat_n(n, width - row.len()));
        gates.extend(std::iter::repeat_n(1.0, row.len()));
        gates.extend(std::iter::repeat_n(0.0, width - row.len()));
    }
    Ok(HashRouting {
        assignment: RoutingAssignment {
            indices: IndexMatrix::from_vec(e, width, n + 1, flat)?,
            gates: Matrix::from_vec(e, width, gates)?,
            num_tokens: n,
            rule: GateRule::Unit,
        },
        per_expert,
    })
}

/// Switch-style balancing loss `α·e·Σ_i f_i·P_i`, where `f_i` is the share of
/// claims (before truncation) at expert `i` and `P_i` the mean router
/// probability. Returns the loss and its gradient with respect to `S`.
pub fn aux_balance_loss(s: &Matrix, tc: &TokenChoiceResult, alpha: f64) -> (f64, Matrix) {
    let (n, e) = s.shape();
    let claims = (n * tc.top_k) as f64;
    let frac: Vec<f64> = tc.per_expert_demand.iter().map(|&d| d as f64 / claims).collect();
    let scale = alpha * e as f64;
    let mut loss = 0.0;
    for (i, f) in frac.iter().enumerate() {
        let mean_p = s.column(i).iter().sum::<f64>() / n as f64;
        loss += f * mean_p;
    }
    let grad = Matrix::from_fn(n, e, |_, i| scale * frac[i] / n as f64).expect("finite");
    (scale * loss, grad)
}

/// Router selection for the MoE layer and harness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Router {
    ExpertChoice,
    Capped(CappedOptions),
    TokenChoice { top_k: usize },
    Hash,
}

impl Router {
    pub fn name(&self) -> &'static str {
        match self {
            Router::ExpertChoice => "ec",
            Router::Capped(_) => "ec-capped",
            Router::TokenChoice { top_k: 1 } => "top1",
            Router::TokenChoice { .. } => "top2",
            Router::Hash => "hash",
        }
    }

    /// Routes a batch with affinity `s`. `ids` feed the hash router.
    pub fn route(&self, s: &Matrix, cfg: &RouterConfig, ids: &[u32]) -> Result<RouteOutcome> {
        if s.rows() != cfg.tokens || s.cols() != cfg.num_experts {
            return Err(Error::DimensionMismatch {
                op: "Router::route",
                detail: format!("S is {}x{}, config says {}x{}", s.rows(), s.cols(), cfg.tokens, cfg.num_experts),
            });
        }
        let k = cfg.k()?;
        Ok(match self {
            Router::ExpertChoice => RouteOutcome::plain(expert_choice_route(s, k)?),
            Router::Capped(opts) => {
                let (assignment, solution) = capped::capped_route(s, k, opts)?;
                RouteOutcome { assignment, token_choice: None, solver: Some(solution) }
            }
            Router::TokenChoice { top_k } => {
                let tc = token_choice_route(s, *top_k, k)?;
                RouteOutcome {
                    assignment: tc.assignment.clone(),
                    token_choice: Some(TokenChoiceSummary {
                        top_k: tc.top_k,
                        dropped: tc.dropped,
                        per_expert_demand: tc.per_expert_demand,
                    }),
                    solver: None,
                }
            }
            Router::Hash => RouteOutcome::plain(hash_route(ids, cfg.num_experts, k)?.assignment),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenChoiceSummary {
    pub top_k: usize,
    pub dropped: Vec<(usize, usize)>,
    pub per_expert_demand: Vec<usize>,
}

impl TokenChoiceSummary {
    pub fn to_result(&self, assignment: &RoutingAssignment) -> TokenChoiceResult {
        TokenChoiceResult {
            assignment: assignment.clone(),
            top_k: self.top_k,
            dropped: self.dropped.clone(),
            per_expert_demand: self.per_expert_demand.clone(),
        }
    }
}

/// Assignment plus router-specific side information.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteOutcome {
    pub assignment: RoutingAssignment,
    pub token_choice: Option<TokenChoiceSummary>,
    pub solver: Option<CappedSolution>,
}

impl RouteOutcome {
    fn plain(assignment: RoutingAssignment) -> Self {
        Self { assignment, token_choice: None, solver: None }
    }
}
