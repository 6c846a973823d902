//! Load-balance and per-token heterogeneity statistics.

use serde::{Deserialize, Serialize};

use crate::routing::{RouteOutcome, RouterConfig, RoutingAssignment, TokenChoiceResult, TokenChoiceSummary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadStats {
    pub num_tokens: usize,
    pub bucket_size: usize,
    pub per_expert_load: Vec<usize>,
    /// `experts_per_token_hist[m]` = tokens routed to exactly `m` experts.
    pub experts_per_token_hist: Vec<usize>,
    pub mean_experts_per_token: f64,
    /// Dropped claims / all claims (token choice only).
    pub over_capacity_ratio: f64,
    /// `max_i dropped_i / demand_i` (token choice only).
    pub max_expert_over_capacity_ratio: f64,
    /// Tokens with no accepted expert / n.
    pub dropped_token_fraction: f64,
}

/// What statistics are computed from.
#[derive(Clone, Copy, Debug)]
pub enum StatsInput<'a> {
    Assignment(&'a RoutingAssignment),
    TokenChoice(&'a RoutingAssignment, &'a TokenChoiceSummary),
}

impl<'a> From<&'a RoutingAssignment> for StatsInput<'a> {
    fn from(a: &'a RoutingAssignment) -> Self {
        StatsInput::Assignment(a)
    }
}

impl<'a> From<&'a RouteOutcome> for StatsInput<'a> {
    fn from(o: &'a RouteOutcome) -> Self {
        match &o.token_choice {
            Some(tc) => StatsInput::TokenChoice(&o.assignment, tc),
            None => StatsInput::Assignment(&o.assignment),
        }
    }
}

/// Borrowing a full `TokenChoiceResult` needs a summary view; this owns one.
pub fn token_choice_stats(tc: &TokenChoiceResult, cfg: &RouterConfig) -> LoadStats {
    let summary = TokenChoiceSummary {
        top_k: tc.top_k,
        dropped: tc.dropped.clone(),
        per_expert_demand: tc.per_expert_demand.clone(),
    };
    compute_stats(StatsInput::TokenChoice(&tc.assignment, &summary), cfg)
}

pub fn compute_stats<'a>(input: impl Into<StatsInput<'a>>, cfg: &RouterConfig) -> LoadStats {
    let input = input.into();
    let assignment = match input {
        StatsInput::Assignment(a) | StatsInput::TokenChoice(a, _) => a,
    };
    let e = assignment.num_experts();
    let n = assignment.num_tokens;
    let per_expert_load: Vec<usize> = (0..e).map(|i| assignment.expert_tokens(i).count()).collect();
    let multiplicity = assignment.token_multiplicity();
    let mut hist = vec![0usize; e + 1];
    for &m in &multiplicity {
        hist[m] += 1;
    }
    let total: usize = per_expert_load.iter().sum();

    let (over, max_over) = match input {
        StatsInput::TokenChoice(_, tc) => {
            let claims = (n * tc.top_k) as f64;
            let mut drops = vec![0usize; e];
            for &(_, ex) in &tc.dropped {
                drops[ex] += 1;
            }
            let max_over = drops
                .iter()
                .zip(&tc.per_expert_demand)
                .filter(|(_, &d)| d > 0)
                .map(|(&x, &d)| x as f64 / d as f64)
                .fold(0.0, f64::max);
            (tc.dropped.len() as f64 / claims, max_over)
        }
        StatsInput::Assignment(_) => (0.0, 0.0),
    };

    LoadStats {
        num_tokens: n,
        bucket_size: cfg.k().unwrap_or(0),
        per_expert_load,
        mean_experts_per_token: total as f64 / n as f64,
        over_capacity_ratio: over,
        max_expert_over_capacity_ratio: max_over,
        dropped_token_fraction: hist[0] as f64 / n as f64,
        experts_per_token_hist: hist,
    }
}

/// Number of tokens that appear in more than `b` expert rows.
pub fn cap_violations(assignment: &RoutingAssignment, b: usize) -> usize {
    assignment.token_multiplicity().into_iter().filter(|&m| m > b).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::Prng;
    use crate::routing::{expert_choice_route, hash_route, token_choice_route};
    use crate::tensor::{softmax_rows, Matrix};
    use proptest::prelude::*;

    #[test]
    fn expert_choice_stats() {
        let mut prng = Prng::new(4);
        let s = softmax_rows(&Matrix::from_fn(8, 4, |_, _| prng.next_normal()).unwrap()).unwrap();
        let cfg = RouterConfig::new(4, 2.0, 8).unwrap();
        let a = expert_choice_route(&s, cfg.k().unwrap()).unwrap();
        let st = compute_stats(&a, &cfg);
        assert_eq!(st.per_expert_load, vec![4; 4]);
        assert_eq!(st.over_capacity_ratio, 0.0);
        assert_eq!(st.mean_experts_per_token, 2.0);
        assert_eq!(st.experts_per_token_hist.iter().sum::<usize>(), 8);
    }

    #[test]
    fn token_choice_hand_trace() {
        let s = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.8, 0.2], vec![0.7, 0.3], vec![0.6, 0.4]]).unwrap();
        let cfg = RouterConfig::new(2, 1.0, 4).unwrap();
        let tc = token_choice_route(&s, 1, 2).unwrap();
        let st = token_choice_stats(&tc, &cfg);
        assert_eq!(st.over_capacity_ratio, 0.5);
        assert_eq!(st.dropped_token_fraction, 0.5);
        assert_eq!(st.max_expert_over_capacity_ratio, 0.5);
        assert_eq!(st.experts_per_token_hist, vec![2, 2, 0]);
    }

    #[test]
    fn hash_stats_have_no_over_capacity() {
        let h = hash_route(&[0, 0, 0, 1], 2, 0).unwrap();
        let st = compute_stats(&h.assignment, &RouterConfig::new(2, 1.0, 4).unwrap());
        assert_eq!(st.per_expert_load, vec![3, 1]);
        assert_eq!(st.over_capacity_ratio, 0.0);
    }

    #[test]
    fn cap_violation_cases() {
        // one dominant token: every expert ranks token 0 first
        let s = Matrix::from_fn(6, 4, |t, _| if t == 0 { 0.9 } else { 0.1 / (t as f64) }).unwrap();
        let a = expert_choice_route(&s, 3).unwrap();
        assert!(cap_violations(&a, 2) > 0);
        assert_eq!(cap_violations(&a, 4), 0);
    }

    proptest! {
        #[test]
        fn histogram_identities(seed in any::<u64>(), n in 1usize..50, e in 2usize..8, top_k in 1usize..=2, k in 1usize..12) {
            let mut prng = Prng::new(seed);
            let s = softmax_rows(&Matrix::from_fn(n, e, |_, _| 2.0 * prng.next_normal()).unwrap()).unwrap();
            let cfg = RouterConfig::new(e, 1.0, n).unwrap();
            let tc = token_choice_route(&s, top_k, k).unwrap();
            let st = token_choice_stats(&tc, &cfg);
            prop_assert_eq!(st.experts_per_token_hist.iter().sum::<usize>(), n);
            let weighted: usize = st.experts_per_token_hist.iter().enumerate().map(|(m, c)| m * c).sum();
            prop_assert_eq!(weighted, st.per_expert_load.iter().sum::<usize>());
            prop_assert!((0.0..=1.0).contains(&st.over_capacity_ratio));
            let any_over = tc.per_expert_demand.iter().any(|&d| d > k);
            prop_assert_eq!(st.over_capacity_ratio > 0.0, any_over);
        }
    }
}
