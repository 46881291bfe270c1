use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::TokenBatch;
use crate::{seeded_rng, Error, Result};

/// Parameters of the clustered regression task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub clusters: usize,
    pub d: usize,
    pub tokens: usize,
    /// Per-coordinate standard deviation of tokens around their cluster mean.
    pub cluster_std: f64,
    /// Minimum distance between cluster means, in units of `cluster_std`.
    pub min_separation: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            clusters: 8,
            d: 16,
            tokens: 2048,
            cluster_std: 0.15,
            min_separation: 8.0,
            seed: 0,
        }
    }
}

/// Tokens drawn from Gaussian clusters; each cluster has its own linear
/// target map, so one expert per cluster is the ideal layout.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub batch: TokenBatch,
    pub labels: Vec<usize>,
    /// clusters x d
    pub means: Array2<f64>,
    /// One d x d map per cluster.
    pub maps: Vec<Array2<f64>>,
    pub spec: TaskSpec,
}

impl SyntheticTask {
    /// Index of the closest cluster mean to each token.
    pub fn nearest_mean_labels(&self) -> Vec<usize> {
        self.batch
            .x
            .rows()
            .into_iter()
            .map(|x| {
                let dist = |c: usize| (&self.means.row(c) - &x).mapv(|v| v * v).sum();
                (0..self.means.nrows())
                    .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
                    .unwrap()
            })
            .collect()
    }
}

pub fn make_synthetic_task(spec: &TaskSpec) -> Result<SyntheticTask> {
    if spec.clusters < 2 {
        return Err(Error::invalid("need at least two clusters"));
    }
    if spec.d == 0 || spec.tokens == 0 || !(spec.cluster_std > 0.0) {
        return Err(Error::invalid("d, tokens and cluster_std must be positive"));
    }
    let mut rng = seeded_rng(spec.seed);
    let (c, d) = (spec.clusters, spec.d);
    let min_dist = spec.min_separation * spec.cluster_std;

    // Unit-variance means, redrawn (then spread out) until well separated.
    let mut spread = 1.0;
    let means = loop {
        let mut found = None;
        for _ in 0..100 {
            let means = Array2::from_shape_simple_fn((c, d), || {
                let z: f64 = StandardNormal.sample(&mut rng);
                spread * z
            });
            let ok = (0..c)
                .all(|a| (a + 1..c).all(|b| (&means.row(a) - &means.row(b)).mapv(|v| v * v).sum().sqrt() >= min_dist));
            if ok {
                found = Some(means);
                break;
            }
        }
        if let Some(m) = found {
            break m;
        }
        spread *= 1.5;
    };

    let map_dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).unwrap();
    let maps: Vec<Array2<f64>> = (0..c)
        .map(|_| Array2::from_shape_simple_fn((d, d), || map_dist.sample(&mut rng)))
        .collect();

    let jitter = Normal::new(0.0, spec.cluster_std).unwrap();
    let mut x = Array2::zeros((spec.tokens, d));
    let mut targets = Array2::zeros((spec.tokens, d));
    let mut labels = Vec::with_capacity(spec.tokens);
    for t in 0..spec.tokens {
        let label = t % c;
        let point: Array1<f64> = &means.row(label) + &Array1::from_shape_simple_fn(d, || jitter.sample(&mut rng));
        targets.row_mut(t).assign(&maps[label].dot(&point));
        x.row_mut(t).assign(&point);
        labels.push(label);
    }
    Ok(SyntheticTask {
        batch: TokenBatch::new(x, Some(targets))?,
        labels,
        means,
        maps,
        spec: spec.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded() {
        let spec = TaskSpec {
            tokens: 64,
            ..Default::default()
        };
        let a = make_synthetic_task(&spec).unwrap();
        let b = make_synthetic_task(&spec).unwrap();
        assert_eq!(a.batch, b.batch);
        let c = make_synthetic_task(&TaskSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.batch, c.batch);
    }

    #[test]
    fn targets_are_cluster_maps() {
        let task = make_synthetic_task(&TaskSpec {
            tokens: 40,
            d: 5,
            clusters: 3,
            ..Default::default()
        })
        .unwrap();
        let targets = task.batch.targets.as_ref().unwrap();
        for (t, &label) in task.labels.iter().enumerate() {
            let want = task.maps[label].dot(&task.batch.x.row(t));
            assert_eq!(targets.row(t), want);
        }
    }

    #[test]
    fn clusters_are_recoverable() {
        let spec = TaskSpec {
            clusters: 8,
            d: 4,
            tokens: 4000,
            min_separation: 6.0,
            ..Default::default()
        };
        let task = make_synthetic_task(&spec).unwrap();
        let hits = task
            .nearest_mean_labels()
            .iter()
            .zip(&task.labels)
            .filter(|(a, b)| a == b)
            .count();
        assert!(hits as f64 / 4000.0 >= 0.99, "{hits}");
    }

    #[test]
    fn single_cluster_rejected() {
        assert!(make_synthetic_task(&TaskSpec {
            clusters: 1,
            ..Default::default()
        })
        .is_err());
    }
}
