mod common;

use common::*;
use ecmoe::harness::Prng;
use ecmoe::moe::{backward, forward, forward_pinned, gather};
use ecmoe::routing::{affinity, hash_route, GateRule, Router, RouterConfig, RoutingAssignment, TokenBatch};
use ecmoe::tensor::{gelu, IndexMatrix, Matrix};
use proptest::prelude::*;

fn dense_ffn(x: &Matrix, w1: &Matrix, w2: &Matrix) -> Matrix {
    let (n, d) = x.shape();
    let dh = w1.cols();
    Matrix::from_fn(n, d, |t, c| {
        (0..dh)
            .map(|h| {
                let pre: f64 = (0..d).map(|q| x.get(t, q) * w1.get(q, h)).sum();
                gelu(pre) * w2.get(c, h)
            })
            .sum()
    })
    .unwrap()
}

#[test]
fn gradients_match_finite_differences() {
    let mut prng = Prng::new(81);
    for _ in 0..20 {
        let x = TokenBatch::new(normal_matrix(&mut prng, 6, 4, 1.0));
        let params = random_params(&mut prng, 4, 3, 2);
        let cfg = RouterConfig::new(2, 2.0, 6).unwrap();
        let pinned = forward(&x, &params, &Router::ExpertChoice, &cfg).unwrap().assignment;
        let err = fd_gradient_error(&x, &params, &pinned, 1e-5, 1e-4);
        assert!(err < 1e-5, "relative error {err:e}");
    }
}

#[test]
fn gradients_match_with_partial_routing_and_pooled_gates() {
    // k < n leaves tokens unrouted; top-2 at low capacity drops claims
    let mut prng = Prng::new(82);
    for router in [Router::ExpertChoice, Router::TokenChoice { top_k: 2 }, Router::TokenChoice { top_k: 1 }] {
        for _ in 0..5 {
            let x = TokenBatch::new(normal_matrix(&mut prng, 8, 4, 1.0));
            let params = random_params(&mut prng, 4, 3, 3);
            let cfg = RouterConfig::new(3, 0.75, 8).unwrap();
            let pinned = forward(&x, &params, &router, &cfg).unwrap().assignment;
            let err = fd_gradient_error(&x, &params, &pinned, 1e-5, 1e-4);
            assert!(err < 1e-5, "{} relative error {err:e}", router.name());
        }
    }
}

#[test]
fn unit_gates_leave_the_gating_weights_without_gradient() {
    let mut prng = Prng::new(83);
    let x = TokenBatch::with_ids(normal_matrix(&mut prng, 8, 3, 1.0), (0..8).collect()).unwrap();
    let params = random_params(&mut prng, 3, 4, 2);
    let pinned = hash_route(&x.token_ids(), 2, 4).unwrap().assignment;
    let trace = forward_pinned(&x, &params, &pinned).unwrap();
    let g = backward(&trace, &x, &params, &trace.x_out.map(|v| 2.0 * v)).unwrap();
    assert!(g.w_g.as_slice().iter().all(|&v| v == 0.0));
    assert!(fd_gradient_error(&x, &params, &pinned, 1e-5, 1e-4) < 1e-5);
}

#[test]
fn scalar_oracle_two_tokens_one_expert() {
    let x = [[0.3, -1.2], [0.8, 0.5]];
    let (w1, w2) = ([0.7, -0.4], [1.1, -0.9]);
    let params = ecmoe::moe::MoEParams::new(
        Matrix::from_rows(&[vec![0.2], vec![-0.6]]).unwrap(),
        vec![Matrix::from_rows(&[vec![w1[0]], vec![w1[1]]]).unwrap()],
        vec![Matrix::from_rows(&[vec![w2[0]], vec![w2[1]]]).unwrap()],
    )
    .unwrap();
    let batch = TokenBatch::new(Matrix::from_rows(&[x[0].to_vec(), x[1].to_vec()]).unwrap());
    let out = forward(&batch, &params, &Router::ExpertChoice, &RouterConfig::new(1, 1.0, 2).unwrap()).unwrap().x_out;
    let want = scalar_forward_oracle(x, w1, w2);
    for t in 0..2 {
        for c in 0..2 {
            assert!((out.get(t, c) - want[t][c]).abs() <= 1e-12);
        }
    }
}

#[test]
fn one_expert_taking_everything_is_a_dense_ffn() {
    let mut prng = Prng::new(84);
    let x = TokenBatch::new(normal_matrix(&mut prng, 10, 5, 1.0));
    let params = random_params(&mut prng, 5, 7, 1);
    let n = x.len();
    let all = RoutingAssignment {
        indices: IndexMatrix::from_vec(1, n, n, (0..n).collect()).unwrap(),
        gates: Matrix::zeros(1, n),
        num_tokens: n,
        rule: GateRule::Unit,
    };
    let out = forward_pinned(&x, &params, &all).unwrap().x_out;
    assert!(out.max_abs_diff(&dense_ffn(&x.x, &params.w1[0], &params.w2[0])) < 1e-12);
}

#[test]
fn full_capacity_mixes_every_expert_by_affinity() {
    // k = n: every expert sees every token, so X_out = Σ_i S[:, i] · FFN_i(X)
    let mut prng = Prng::new(85);
    let (n, d, e) = (6, 3, 3);
    let x = TokenBatch::new(normal_matrix(&mut prng, n, d, 1.0));
    let params = random_params(&mut prng, d, 4, e);
    let out = forward(&x, &params, &Router::ExpertChoice, &RouterConfig::new(e, e as f64, n).unwrap()).unwrap().x_out;
    let s = affinity(&x, &params.w_g).unwrap();
    let mut want = Matrix::zeros(n, d);
    for i in 0..e {
        let ffn = dense_ffn(&x.x, &params.w1[i], &params.w2[i]);
        for t in 0..n {
            for c in 0..d {
                want.set(t, c, want.get(t, c) + s.get(t, i) * ffn.get(t, c));
            }
        }
    }
    assert!(out.max_abs_diff(&want) < 1e-12);
}

#[test]
fn tokens_nobody_picks_output_zero() {
    let mut prng = Prng::new(86);
    let x = TokenBatch::new(normal_matrix(&mut prng, 16, 4, 1.0));
    let params = random_params(&mut prng, 4, 5, 4);
    let trace = forward(&x, &params, &Router::ExpertChoice, &RouterConfig::new(4, 0.5, 16).unwrap()).unwrap();
    let mult = trace.assignment.token_multiplicity();
    assert!(mult.contains(&0));
    for (t, &m) in mult.iter().enumerate() {
        if m == 0 {
            assert!(trace.x_out.row(t).iter().all(|&v| v == 0.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn permuting_tokens_permutes_outputs(seed in any::<u64>(), cf in prop::sample::select(vec![0.5, 1.0, 2.0])) {
        let mut prng = Prng::new(seed);
        let (n, d, e) = (12, 4, 3);
        let x = normal_matrix(&mut prng, n, d, 1.0);
        let params = random_params(&mut prng, d, 5, e);
        let mut perm: Vec<usize> = (0..n).collect();
        for j in (1..n).rev() {
            perm.swap(j, prng.below(j + 1));
        }
        let xp = Matrix::from_fn(n, d, |t, c| x.get(perm[t], c)).unwrap();
        let cfg = RouterConfig::new(e, cf, n).unwrap();
        let a = forward(&TokenBatch::new(x), &params, &Router::ExpertChoice, &cfg).unwrap();
        let b = forward(&TokenBatch::new(xp), &params, &Router::ExpertChoice, &cfg).unwrap();
        for t in 0..n {
            prop_assert_eq!(b.x_out.row(t), a.x_out.row(perm[t]));
        }
    }

    #[test]
    fn gather_and_combine_account_for_every_slot(seed in any::<u64>(), top_k in 1usize..=2, cf in 0.5f64..3.0) {
        let mut prng = Prng::new(seed);
        let (n, d, e) = (20, 3, 4);
        let x = TokenBatch::new(normal_matrix(&mut prng, n, d, 1.0));
        let params = random_params(&mut prng, d, 3, e);
        let cfg = RouterConfig::new(e, cf, n).unwrap();
        for router in [Router::ExpertChoice, Router::TokenChoice { top_k }] {
            let trace = forward(&x, &params, &router, &cfg).unwrap();
            let a = &trace.assignment;
            let xs = gather(&x.x, a);
            let k = cfg.k().unwrap();
            let mut rows = 0;
            for (i, xi) in xs.iter().enumerate() {
                prop_assert_eq!(xi.shape(), (a.slots(), d));
                for j in 0..a.slots() {
                    if a.is_padding(i, j) {
                        prop_assert!(xi.row(j).iter().all(|&v| v == 0.0));
                        prop_assert_eq!(a.gates.get(i, j), 0.0);
                    } else {
                        prop_assert_eq!(xi.row(j), x.x.row(a.indices.get(i, j)));
                        rows += 1;
                    }
                }
                prop_assert!(a.expert_tokens(i).count() <= k);
            }
            prop_assert_eq!(rows, a.token_multiplicity().iter().sum::<usize>());
        }
    }
}
