//! Spherical k-means and vMF dictionary learning.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::rng::rng_from_seed;
use crate::vmf::{dot, estimate_kappa, normalize, VmfComponent, VmfDictionary, DEFAULT_SIGMA_MAX};

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of cosine similarities to the assigned centroid after each assignment step.
    pub objective_trace: Vec<f64>,
}

fn assign(vectors: &[&[f64]], centroids: &[Vec<f64>], assignments: &mut [usize], sims: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for (i, v) in vectors.iter().enumerate() {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (k, c) in centroids.iter().enumerate() {
            let s = dot(c, v);
            if s > best.1 {
                best = (k, s);
            }
        }
        assignments[i] = best.0;
        sims[i] = best.1;
        total += best.1;
    }
    total
}

/// k-means++ style seeding with cosine distance `1 − cos`.
fn seed_centroids<R: Rng>(vectors: &[&[f64]], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = vectors.len();
    let mut centroids = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    centroids.push(vectors[first].to_vec());
    let mut dist: Vec<f64> = vectors.iter().map(|v| (1.0 - dot(v, &centroids[0])).max(0.0)).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut t = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in dist.iter().enumerate() {
                if t < *d {
                    chosen = i;
                    break;
                }
                t -= d;
            }
            chosen
        };
        let c = vectors[pick].to_vec();
        for (d, v) in dist.iter_mut().zip(vectors) {
            *d = d.min((1.0 - dot(v, &c)).max(0.0));
        }
        centroids.push(c);
    }
    centroids
}

/// Spherical k-means over unit vectors. The objective trace is non-decreasing.
pub fn spherical_kmeans(vectors: &[&[f64]], k: usize, max_iters: usize, seed: u64) -> Result<KMeansResult> {
    ensure!(k >= 1, InvalidArgument, "k must be >= 1");
    ensure!(
        vectors.len() >= k,
        InvalidArgument,
        "need at least k = {k} vectors, got {}",
        vectors.len()
    );
    let d = vectors[0].len();
    ensure!(
        vectors.iter().all(|v| v.len() == d),
        DimensionMismatch,
        "vectors have mixed dimensions"
    );
    let mut rng = rng_from_seed(seed);
    let mut centroids = seed_centroids(vectors, k, &mut rng);
    let n = vectors.len();
    let mut assignments = vec![usize::MAX; n];
    let mut sims = vec![0.0; n];
    let mut trace = Vec::new();
    let mut prev = vec![usize::MAX; n];
    let mut converged = false;
    for _ in 0..max_iters.max(1) {
        let obj = assign(vectors, &centroids, &mut assignments, &mut sims);
        trace.push(obj);
        if assignments == prev {
            converged = true;
            break;
        }
        prev.clone_from(&assignments);

        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (v, &a) in vectors.iter().zip(&assignments) {
            counts[a] += 1;
            sums[a].iter_mut().zip(v.iter()).for_each(|(s, x)| *s += x);
        }
        for (c, s) in centroids.iter_mut().zip(sums.iter_mut()) {
            if normalize(s) > 1e-12 {
                c.clone_from(s);
            }
        }
        // reseed empty clusters from the points farthest from their centroid
        let empties: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
        if !empties.is_empty() {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)));
            for (j, &i) in empties.iter().zip(&order) {
                centroids[*j] = vectors[i].to_vec();
            }
        }
    }
    if !converged {
        trace.push(assign(vectors, &centroids, &mut assignments, &mut sims));
    }
    Ok(KMeansResult {
        centroids,
        assignments,
        objective_trace: trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// Concentration estimated per cluster.
    PerCluster,
    /// One concentration for every component; the normalizer then cancels in likelihood ratios.
    Shared(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DictionaryConfig {
    pub k: usize,
    pub max_iters: usize,
    pub sigma_mode: SigmaMode,
    pub sigma_max: f64,
    pub seed: u64,
}

impl Default for DictionaryConfig {
    fn default() -> Self {
        Self {
            k: 64,
            max_iters: 50,
            sigma_mode: SigmaMode::PerCluster,
            sigma_max: DEFAULT_SIGMA_MAX,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LearnedDictionary {
    pub dictionary: VmfDictionary,
    pub assignments: Vec<usize>,
    pub objective_trace: Vec<f64>,
}

/// Learns `K` vMF components from unit vectors by spherical k-means plus per-cluster
/// concentration estimates.
pub fn learn_dictionary(vectors: &[&[f64]], config: &DictionaryConfig) -> Result<LearnedDictionary> {
    let km = spherical_kmeans(vectors, config.k, config.max_iters, config.seed)?;
    let mut members: Vec<Vec<&[f64]>> = vec![Vec::new(); config.k];
    for (v, &a) in vectors.iter().zip(&km.assignments) {
        members[a].push(v);
    }
    let components = km
        .centroids
        .iter()
        .zip(&members)
        .map(|(mu, m)| {
            let sigma = match config.sigma_mode {
                SigmaMode::Shared(s) => s.clamp(0.0, config.sigma_max),
                SigmaMode::PerCluster if m.is_empty() => 0.0,
                SigmaMode::PerCluster => estimate_kappa(m, config.sigma_max)?,
            };
            let mut mu = mu.clone();
            normalize(&mut mu);
            Ok(VmfComponent { mu, sigma })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LearnedDictionary {
        dictionary: VmfDictionary::new(components)?,
        assignments: km.assignments,
        objective_trace: km.objective_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_single_cluster() {
        let v = vec![0.6, 0.8, 0.0];
        let vs: Vec<&[f64]> = vec![&v; 10];
        let cfg = DictionaryConfig { k: 1, ..DictionaryConfig::default() };
        let d = learn_dictionary(&vs, &cfg).unwrap().dictionary;
        let c = &d.components()[0];
        for (a, b) in c.mu.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(c.sigma, DEFAULT_SIGMA_MAX);
    }

    #[test]
    fn too_few_vectors() {
        let v = vec![1.0, 0.0];
        let cfg = DictionaryConfig { k: 3, ..DictionaryConfig::default() };
        assert!(learn_dictionary(&[&v, &v], &cfg).is_err());
    }

    #[test]
    fn shared_sigma_mode() {
        let a = vec![1.0, 0.0, 0.0];
        let b = vec![0.0, 1.0, 0.0];
        let vs: Vec<&[f64]> = vec![&a, &a, &b, &b];
        let cfg = DictionaryConfig { k: 2, sigma_mode: SigmaMode::Shared(30.0), ..DictionaryConfig::default() };
        let d = learn_dictionary(&vs, &cfg).unwrap().dictionary;
        assert!(d.components().iter().all(|c| c.sigma == 30.0));
    }
}
