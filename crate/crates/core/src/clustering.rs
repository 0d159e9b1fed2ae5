//! Seeded k-means over node feature rows and the cluster-level
//! aggregation of per-node log-posteriors into shared guidance scales.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::guidance::{guidance_scale, GuidanceConfig};

/// Default Lloyd iteration cap.
pub const DEFAULT_MAX_ITER: usize = 20;

/// Default cluster count `max(1, round(N / 20))`.
pub fn default_cluster_count(n_nodes: usize) -> usize {
    ((n_nodes as f64 / 20.0).round() as usize).max(1)
}

/// Partition of `N` nodes into `K_c` nonempty clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    labels: Vec<usize>,
    centers: Vec<Vec<f64>>,
    n_clusters: usize,
    /// Within-cluster sum of squares after each Lloyd iteration.
    sse_history: Vec<f64>,
}

impl ClusterAssignment {
    /// Builds an assignment from labels; every label in `0..n_clusters`
    /// must be used at least once. Centers are left empty.
    pub fn from_labels(labels: Vec<usize>, n_clusters: usize) -> Result<Self> {
        let mut used = vec![false; n_clusters];
        for &l in &labels {
            if l >= n_clusters {
                return Err(invalid(format!("label {l} out of range 0..{n_clusters}")));
            }
            used[l] = true;
        }
        if let Some(j) = used.iter().position(|u| !u) {
            return Err(invalid(format!("cluster {j} is empty")));
        }
        Ok(Self {
            labels,
            centers: Vec::new(),
            n_clusters,
            sse_history: Vec::new(),
        })
    }

    /// Every node in cluster 0.
    pub fn single(n_nodes: usize) -> Self {
        Self {
            labels: vec![0; n_nodes],
            centers: Vec::new(),
            n_clusters: 1,
            sse_history: Vec::new(),
        }
    }

    /// Node `i` alone in cluster `i`.
    pub fn singletons(n_nodes: usize) -> Self {
        Self {
            labels: (0..n_nodes).collect(),
            centers: Vec::new(),
            n_clusters: n_nodes,
            sse_history: Vec::new(),
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn n_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn sse_history(&self) -> &[f64] {
        &self.sse_history
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == cluster)
            .map(|(i, _)| i)
            .collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn total_sse(features: &[Vec<f64>], centers: &[Vec<f64>], labels: &[usize]) -> f64 {
    features
        .iter()
        .zip(labels)
        .map(|(f, &l)| sq_dist(f, &centers[l]))
        .sum()
}

/// k-means++ seeding followed by Lloyd iterations until the labels stop
/// changing or `max_iter` is reached. Deterministic for a given seed.
///
/// `features` holds one row per node; all rows must have equal length.
pub fn kmeans(
    features: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<ClusterAssignment> {
    let n = features.len();
    if k == 0 || k > n {
        return Err(invalid(format!("cluster count {k} must lie in 1..={n}")));
    }
    if max_iter == 0 {
        return Err(invalid("max_iter must be at least 1"));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(invalid("feature rows have unequal length"));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite feature value"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(features, k, &mut rng);
    let mut labels = assign(features, &centers);
    repair_empty(features, &mut centers, &mut labels, k);
    let mut sse_history = vec![total_sse(features, &centers, &labels)];

    for _ in 0..max_iter {
        update_centers(features, &mut centers, &labels, dim);
        let mut next = assign(features, &centers);
        repair_empty(features, &mut centers, &mut next, k);
        let sse = total_sse(features, &centers, &next);
        sse_history.push(sse);
        if next == labels {
            break;
        }
        labels = next;
    }

    Ok(ClusterAssignment {
        labels,
        centers,
        n_clusters: k,
        sse_history,
    })
}

fn plus_plus_init(features: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = features.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centers = vec![features[first].clone()];
    let mut d2: Vec<f64> = features.iter().map(|f| sq_dist(f, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().zip(&chosen).filter(|(_, &c)| !c).map(|(d, _)| d).sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for i in 0..n {
                if chosen[i] || d2[i] <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < d2[i] {
                    break;
                }
                target -= d2[i];
            }
            pick.expect("positive total weight")
        } else {
            // All remaining points coincide with a center: pick uniformly.
            let rest: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            rest[rng.random_range(0..rest.len())]
        };
        chosen[pick] = true;
        centers.push(features[pick].clone());
        for (i, f) in features.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(f, &features[pick]));
        }
    }
    centers
}

fn assign(features: &[Vec<f64>], centers: &[Vec<f64>]) -> Vec<usize> {
    features
        .iter()
        .map(|f| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let d = sq_dist(f, c);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Moves the point farthest from its center (among clusters with more than
/// one member) into each empty cluster.
fn repair_empty(features: &[Vec<f64>], centers: &mut [Vec<f64>], labels: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut donor = None;
        let mut donor_d = -1.0;
        for (i, f) in features.iter().enumerate() {
            if counts[labels[i]] < 2 {
                continue;
            }
            let d = sq_dist(f, &centers[labels[i]]);
            if d > donor_d {
                donor_d = d;
                donor = Some(i);
            }
        }
        let i = donor.expect("k <= n guarantees a cluster with two members");
        labels[i] = empty;
        centers[empty] = features[i].clone();
    }
}

fn update_centers(features: &[Vec<f64>], centers: &mut [Vec<f64>], labels: &[usize], dim: usize) {
    let k = centers.len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (f, &l) in features.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(f) {
            *s += v;
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
        }
    }
}

/// Arithmetic mean of the per-node log-posteriors inside each cluster.
pub fn cluster_log_posterior(log_posterior: &[f64], clusters: &ClusterAssignment) -> Result<Vec<f64>> {
    if log_posterior.len() != clusters.n_nodes() {
        return Err(invalid(format!(
            "{} log-posteriors for {} clustered nodes",
            log_posterior.len(),
            clusters.n_nodes()
        )));
    }
    let k = clusters.n_clusters();
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (&lp, &l) in log_posterior.iter().zip(clusters.labels()) {
        sums[l] += lp;
        counts[l] += 1;
    }
    sums.iter()
        .zip(&counts)
        .enumerate()
        .map(|(j, (&s, &c))| {
            if c == 0 {
                Err(Error::State(format!("cluster {j} is empty")))
            } else {
                Ok(s / c as f64)
            }
        })
        .collect()
}

/// Guidance scale of each cluster, expanded to one entry per node.
pub fn cluster_scales(
    cluster_log_posterior: &[f64],
    clusters: &ClusterAssignment,
    cfg: &GuidanceConfig,
) -> Result<Vec<f64>> {
    if cluster_log_posterior.len() != clusters.n_clusters() {
        return Err(invalid(format!(
            "{} cluster posteriors for {} clusters",
            cluster_log_posterior.len(),
            clusters.n_clusters()
        )));
    }
    let per_cluster: Vec<f64> = cluster_log_posterior
        .iter()
        .map(|&lp| guidance_scale(lp, cfg.pi, cfg.lambda_max))
        .collect();
    Ok(clusters.labels().iter().map(|&l| per_cluster[l]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn single_cluster_labels_all_zero() {
        let a = kmeans(&rows(&[0.0, 1.0, 5.0, 9.0]), 1, 3, 20).unwrap();
        assert_eq!(a.labels(), &[0, 0, 0, 0]);
    }

    #[test]
    fn k_equals_n_gives_singletons() {
        for seed in 0..20 {
            let a = kmeans(&rows(&[0.0, 1.0, 1.0, 9.0, 9.0]), 5, seed, 20).unwrap();
            let mut l = a.labels().to_vec();
            l.sort_unstable();
            assert_eq!(l, vec![0, 1, 2, 3, 4]);
        }
    }

    /// Brute force over all 2-partitions of the five points.
    fn best_two_partition(points: &[f64]) -> Vec<usize> {
        let n = points.len();
        let mut best = (f64::INFINITY, vec![]);
        for bits in 1..(1u32 << n) - 1 {
            let labels: Vec<usize> = (0..n).map(|i| ((bits >> i) & 1) as usize).collect();
            let mut sse = 0.0;
            for c in 0..2 {
                let m: Vec<f64> = (0..n).filter(|&i| labels[i] == c).map(|i| points[i]).collect();
                let mean = m.iter().sum::<f64>() / m.len() as f64;
                sse += m.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
            }
            if sse < best.0 {
                best = (sse, labels);
            }
        }
        best.1
    }

    #[test]
    fn separated_blobs_match_exhaustive_optimum() {
        let pts = [0.0, 0.1, 0.2, 10.0, 10.1];
        let oracle = best_two_partition(&pts);
        assert_eq!(oracle[0], oracle[1]);
        assert_eq!(oracle[1], oracle[2]);
        assert_eq!(oracle[3], oracle[4]);
        assert_ne!(oracle[0], oracle[3]);
        for seed in 0..10 {
            let a = kmeans(&rows(&pts), 2, seed, 20).unwrap();
            let l = a.labels();
            let same = |i: usize, j: usize| (l[i] == l[j]) == (oracle[i] == oracle[j]);
            for i in 0..5 {
                for j in 0..5 {
                    assert!(same(i, j), "seed {seed}: {l:?}");
                }
            }
        }
    }

    #[test]
    fn rejects_bad_cluster_counts() {
        assert!(kmeans(&rows(&[1.0, 2.0]), 3, 0, 20).is_err());
        assert!(kmeans(&rows(&[1.0, 2.0]), 0, 0, 20).is_err());
        assert!(kmeans(&rows(&[1.0, 2.0]), 1, 0, 0).is_err());
    }

    #[test]
    fn deterministic_for_seed() {
        let f: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 1.3).cos()])
            .collect();
        let a = kmeans(&f, 4, 11, 20).unwrap();
        let b = kmeans(&f, 4, 11, 20).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn aggregation_examples() {
        let c = ClusterAssignment::from_labels(vec![0, 1, 1], 2).unwrap();
        let lp = cluster_log_posterior(&[-0.5, -1.0, -3.0], &c).unwrap();
        assert_eq!(lp, vec![-0.5, -2.0]);
        assert!(ClusterAssignment::from_labels(vec![0, 0], 2).is_err());
    }

    #[test]
    fn cluster_scale_plug_in() {
        let cfg = GuidanceConfig::default();
        let c = ClusterAssignment::from_labels(vec![0, 1, 0], 2).unwrap();
        let s = cluster_scales(&[0.0, 0.6f64.ln()], &c, &cfg).unwrap();
        assert!((s[0] - 2.0).abs() < 1e-12);
        assert!((s[1] - 6.0_f64.min(cfg.lambda_max)).abs() < 1e-9);
        assert_eq!(s[0], s[2]);
    }
}
