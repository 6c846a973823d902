//! Clustered synthetic token batches and the cluster-conditional toy task.
//!
//! Generation recipe for a [`SyntheticSpec`] (one splitmix64 stream seeded
//! with `seed`; Box–Muller normals are produced in pairs and a leftover
//! normal is consumed by the next normal draw):
//!
//! 1. `clusters × d` cluster centres, standard normal, row-major.
//! 2. Per batch: cluster sizes are the largest-remainder apportionment of
//!    `n` with weights `(c+1)^(−skew)`; labels are laid out cluster by
//!    cluster and Fisher–Yates shuffled (`i = n−1 … 1`, `j = below(i+1)`).
//! 3. Per batch: token `t` = centre of its label + `0.1·N(0,1)` per
//!    coordinate, row-major.
//!
//! Token ids are `0..n`.

use serde::{Deserialize, Serialize};

use super::prng::{derive_seed, Prng};
use crate::error::{Error, Result};
use crate::routing::TokenBatch;
use crate::tensor::{softmax_rows, Matrix};

pub const NOISE_SIGMA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    pub clusters: usize,
    pub skew: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.clusters == 0 {
            return Err(Error::InvalidArgument("n, d and clusters must be >= 1".into()));
        }
        if !(self.skew >= 0.0 && self.skew.is_finite()) {
            return Err(Error::InvalidArgument(format!("skew must be >= 0, got {}", self.skew)));
        }
        Ok(())
    }

    /// Tokens per cluster under the power-law weights.
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let weights: Vec<f64> = (0..self.clusters).map(|c| ((c + 1) as f64).powf(-self.skew)).collect();
        let total: f64 = weights.iter().sum();
        let exact: Vec<f64> = weights.iter().map(|w| self.n as f64 * w / total).collect();
        let mut sizes: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
        let mut order: Vec<usize> = (0..self.clusters).collect();
        order.sort_by(|&a, &b| {
            let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        let missing = self.n - sizes.iter().sum::<usize>();
        for &c in order.iter().cycle().take(missing) {
            sizes[c] += 1;
        }
        sizes
    }
}

/// A batch together with the cluster label of every token.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub batch: TokenBatch,
    pub labels: Vec<usize>,
}

/// Stream of batches sharing one set of cluster centres.
#[derive(Clone, Debug)]
pub struct SyntheticSource {
    spec: SyntheticSpec,
    centers: Matrix,
    sizes: Vec<usize>,
    prng: Prng,
}

impl SyntheticSource {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut prng = Prng::new(spec.seed);
        let centers = Matrix::from_fn(spec.clusters, spec.d, |_, _| prng.next_normal())?;
        Ok(Self { sizes: spec.cluster_sizes(), spec, centers, prng })
    }

    pub fn centers(&self) -> &Matrix {
        &self.centers
    }

    pub fn next_batch(&mut self) -> LabeledBatch {
        let SyntheticSpec { n, d, .. } = self.spec;
        let mut labels: Vec<usize> =
            self.sizes.iter().enumerate().flat_map(|(c, &m)| std::iter::repeat_n(c, m)).collect();
        for i in (1..n).rev() {
            let j = self.prng.below(i + 1);
            labels.swap(i, j);
        }
        let mut data = Vec::with_capacity(n * d);
        for &c in &labels {
            for &mu in self.centers.row(c) {
                data.push(mu + NOISE_SIGMA * self.prng.next_normal());
            }
        }
        let x = Matrix::from_vec(n, d, data).expect("finite normals");
        let ids = (0..n as u32).collect();
        LabeledBatch { batch: TokenBatch::with_ids(x, ids).expect("ids match"), labels }
    }
}

/// One batch from a fresh stream.
pub fn gen_batch(spec: &SyntheticSpec) -> Result<LabeledBatch> {
    Ok(SyntheticSource::new(*spec)?.next_batch())
}

/// Per-cluster random linear targets `y_t = x_t · M[label_t]`, with
/// `M[c]` entries `N(0, 1/d)` drawn from the sub-stream `derive_seed(seed, 1)`.
#[derive(Clone, Debug)]
pub struct ToyTask {
    maps: Vec<Matrix>,
}

impl ToyTask {
    pub fn new(seed: u64, clusters: usize, d: usize) -> Result<Self> {
        let mut prng = Prng::new(derive_seed(seed, 1));
        let scale = 1.0 / (d as f64).sqrt();
        let maps =
            (0..clusters).map(|_| Matrix::from_fn(d, d, |_, _| scale * prng.next_normal())).collect::<Result<_>>()?;
        Ok(Self { maps })
    }

    pub fn targets(&self, batch: &LabeledBatch) -> Matrix {
        let x = &batch.batch.x;
        let d = x.cols();
        let mut out = Matrix::zeros(x.rows(), d);
        for (t, &c) in batch.labels.iter().enumerate() {
            let m = &self.maps[c];
            for (a, &xv) in x.row(t).iter().enumerate() {
                for (o, &mv) in out.row_mut(t).iter_mut().zip(m.row(a)) {
                    *o += xv * mv;
                }
            }
        }
        out
    }
}

/// Softmax of `scale · N(0,1)` logits: a generic random affinity matrix.
pub fn random_affinity(prng: &mut Prng, n: usize, e: usize, scale: f64) -> Matrix {
    let logits = Matrix::from_fn(n, e, |_, _| scale * prng.next_normal()).expect("finite");
    softmax_rows(&logits).expect("finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, clusters: usize, skew: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec { n, d: 8, clusters, skew, seed }
    }

    #[test]
    fn deterministic() {
        let s = spec(100, 3, 1.0, 42);
        assert_eq!(gen_batch(&s).unwrap(), gen_batch(&s).unwrap());
        assert_ne!(gen_batch(&s).unwrap().batch, gen_batch(&spec(100, 3, 1.0, 43)).unwrap().batch);
    }

    #[test]
    fn uniform_clusters_are_balanced() {
        let b = gen_batch(&spec(4000, 4, 0.0, 1)).unwrap();
        let mut counts = [0usize; 4];
        for &l in &b.labels {
            counts[l] += 1;
        }
        for c in counts {
            assert!((c as f64 - 1000.0).abs() <= 50.0, "{counts:?}");
        }
    }

    #[test]
    fn skew_follows_power_law() {
        let sizes = spec(1000, 4, 2.0, 0).cluster_sizes();
        assert_eq!(sizes.iter().sum::<usize>(), 1000);
        // weights 1, 1/4, 1/9, 1/16
        assert_eq!(sizes, vec![702, 176, 78, 44]);
    }

    #[test]
    fn single_cluster_is_tight() {
        let mut src = SyntheticSource::new(spec(500, 1, 0.0, 9)).unwrap();
        let center = src.centers().row(0).to_vec();
        let b = src.next_batch();
        for t in 0..500 {
            for (v, mu) in b.batch.x.row(t).iter().zip(&center) {
                assert!((v - mu).abs() < 6.0 * NOISE_SIGMA);
            }
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(gen_batch(&spec(0, 1, 0.0, 0)).is_err());
        assert!(gen_batch(&spec(5, 0, 0.0, 0)).is_err());
        assert!(gen_batch(&spec(5, 2, -1.0, 0)).is_err());
    }

    #[test]
    fn targets_apply_cluster_map() {
        let b = gen_batch(&spec(6, 2, 0.0, 5)).unwrap();
        let task = ToyTask::new(5, 2, 8).unwrap();
        let y = task.targets(&b);
        let t = 3;
        let m = &task.maps[b.labels[t]];
        for j in 0..8 {
            let want: f64 = (0..8).map(|a| b.batch.x.get(t, a) * m.get(a, j)).sum();
            assert!((y.get(t, j) - want).abs() < 1e-12);
        }
    }
}
