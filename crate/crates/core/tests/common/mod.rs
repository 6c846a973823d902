//! Oracles and fixtures shared by the integration tests and the acceptance
//! runner.
#![allow(dead_code)]

use ecmoe::harness::Prng;
use ecmoe::moe::{backward, forward_pinned, MoEParams};
use ecmoe::routing::{RoutingAssignment, TokenBatch};
use ecmoe::tensor::{gelu, Matrix};

pub fn normal_matrix(prng: &mut Prng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * prng.next_normal()).unwrap()
}

pub fn random_params(prng: &mut Prng, d: usize, dh: usize, e: usize) -> MoEParams {
    let w_g = normal_matrix(prng, d, e, 1.0);
    let mut w1 = Vec::new();
    let mut w2 = Vec::new();
    for _ in 0..e {
        w1.push(normal_matrix(prng, d, dh, 0.7));
        w2.push(normal_matrix(prng, d, dh, 0.7));
    }
    MoEParams::new(w_g, w1, w2).unwrap()
}

/// Full-sort top-k of one row: value descending, index ascending.
pub fn sort_topk(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Max over every parameter and input of
/// `|analytic − fd| / max(|analytic|, |fd|, floor)` for `L = Σ X_out²`
/// under pinned routing.
pub fn fd_gradient_error(x: &TokenBatch, params: &MoEParams, pinned: &RoutingAssignment, h: f64, floor: f64) -> f64 {
    let loss = |x: &TokenBatch, p: &MoEParams| -> f64 {
        forward_pinned(x, p, pinned).unwrap().x_out.as_slice().iter().map(|v| v * v).sum()
    };
    let trace = forward_pinned(x, params, pinned).unwrap();
    let grad_out = trace.x_out.map(|v| 2.0 * v);
    let g = backward(&trace, x, params, &grad_out).unwrap();

    let rel = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(floor);
    let mut worst: f64 = 0.0;

    let mut check = |analytic: &Matrix, perturb: &mut dyn FnMut(usize, f64) -> f64| {
        for (idx, &a) in analytic.as_slice().iter().enumerate() {
            let fd = (perturb(idx, h) - perturb(idx, -h)) / (2.0 * h);
            worst = worst.max(rel(a, fd));
        }
    };

    check(&g.x, &mut |idx, dv| {
        let mut xb = x.clone();
        xb.x.as_mut_slice()[idx] += dv;
        loss(&xb, params)
    });
    check(&g.w_g, &mut |idx, dv| {
        let mut p = params.clone();
        p.w_g.as_mut_slice()[idx] += dv;
        loss(x, &p)
    });
    for i in 0..params.num_experts() {
        check(&g.w1[i], &mut |idx, dv| {
            let mut p = params.clone();
            p.w1[i].as_mut_slice()[idx] += dv;
            loss(x, &p)
        });
        check(&g.w2[i], &mut |idx, dv| {
            let mut p = params.clone();
            p.w2[i].as_mut_slice()[idx] += dv;
            loss(x, &p)
        });
    }
    worst
}

/// The n=2, d=2, d'=1, e=1 layer written out by hand. With one expert the
/// softmax gate is 1 and the expert takes both tokens.
pub fn scalar_forward_oracle(x: [[f64; 2]; 2], w1: [f64; 2], w2: [f64; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for t in 0..2 {
        let h = x[t][0] * w1[0] + x[t][1] * w1[1];
        let a = gelu(h);
        out[t][0] = a * w2[0];
        out[t][1] = a * w2[1];
    }
    out
}

/// Best assignment of `e` experts to distinct tokens (k = 1, b = 1) by
/// enumerating every injection. Returns `(tokens, value, runner_up_value)`.
pub fn best_matching(st: &Matrix) -> (Vec<usize>, f64, f64) {
    let (e, n) = st.shape();
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut second = f64::NEG_INFINITY;
    let mut cur = Vec::with_capacity(e);
    fn rec(st: &Matrix, n: usize, cur: &mut Vec<usize>, best: &mut (Vec<usize>, f64), second: &mut f64) {
        let i = cur.len();
        if i == st.rows() {
            let v: f64 = cur.iter().enumerate().map(|(r, &t)| st.get(r, t)).sum();
            if v > best.1 {
                *second = best.1;
                *best = (cur.clone(), v);
            } else if v > *second {
                *second = v;
            }
            return;
        }
        for t in 0..n {
            if !cur.contains(&t) {
                cur.push(t);
                rec(st, n, cur, best, second);
                cur.pop();
            }
        }
    }
    rec(st, n, &mut cur, &mut best, &mut second);
    (best.0, best.1, second)
}

/// Random `e × n` scores on the 0.05 grid whose optimal matching beats the
/// runner-up by at least one grid step.
pub fn tiny_grid_instance(prng: &mut Prng) -> (Matrix, Vec<usize>) {
    loop {
        let e = 1 + prng.below(3);
        let n = e + prng.below(5 - e);
        let st = Matrix::from_fn(e, n, |_, _| 0.05 * prng.below(21) as f64).unwrap();
        let (opt, v, runner_up) = best_matching(&st);
        if v - runner_up >= 0.05 - 1e-9 {
            return (st, opt);
        }
    }
}

/// Affinity whose rows have a gap of at least `gap` between every pair of
/// entries in the same column, so every per-expert top-k is unambiguous.
pub fn gap_separated_affinity(prng: &mut Prng, n: usize, e: usize, gap: f64) -> Matrix {
    let mut s = Matrix::zeros(n, e);
    for i in 0..e {
        let mut order: Vec<usize> = (0..n).collect();
        for j in (1..n).rev() {
            order.swap(j, prng.below(j + 1));
        }
        for (rank, &t) in order.iter().enumerate() {
            s.set(t, i, gap * rank as f64);
        }
    }
    s
}

/// Instance with a planted optimum that respects the cap. Every expert row
/// of the plan has `k` tokens and no token sits in more than `b` rows.
/// Planted entries score about 0.6, the rest at most 0.1. The first `hot`
/// tokens score above 0.9 for every expert, but only the `b` experts rating
/// them highest hold them in the plan. Uncapped expert choice therefore
/// over-subscribes the hot tokens, while the capped optimum is the unique
/// plan. Returns `(S, plan)` with `S` n × e and `plan[i]` sorted.
pub fn planted_cap_instance(
    prng: &mut Prng,
    n: usize,
    e: usize,
    k: usize,
    b: usize,
    hot: usize,
) -> (Matrix, Vec<Vec<usize>>) {
    'retry: loop {
        let mut plan: Vec<Vec<usize>> = vec![Vec::new(); e];
        let mut s = Matrix::zeros(n, e);
        for h in 0..hot {
            let mut order: Vec<usize> = (0..e).collect();
            for j in (1..e).rev() {
                order.swap(j, prng.below(j + 1));
            }
            for (rank, &i) in order.iter().enumerate() {
                s.set(h, i, 0.9 + 0.02 * (e - rank) as f64);
                if rank < b {
                    plan[i].push(h);
                }
            }
        }
        let mut room = vec![b; n];
        room[..hot].fill(0);
        for row in plan.iter_mut() {
            while row.len() < k {
                let best = (hot..n).filter(|t| !row.contains(t)).map(|t| room[t]).max().unwrap_or(0);
                if best == 0 {
                    continue 'retry;
                }
                let pool: Vec<usize> = (hot..n).filter(|&t| room[t] == best && !row.contains(&t)).collect();
                let t = pool[prng.below(pool.len())];
                room[t] -= 1;
                row.push(t);
            }
            row.sort_unstable();
        }
        for t in hot..n {
            for i in 0..e {
                let v = if plan[i].binary_search(&t).is_ok() {
                    0.6 + 0.01 * prng.next_f64()
                } else {
                    0.1 * prng.next_f64()
                };
                s.set(t, i, v);
            }
        }
        return (s, plan);
    }
}
