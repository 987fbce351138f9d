//! Lloyd's algorithm with k-means++ seeding.

use rand::Rng;

use crate::model::squared_distance;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub max_iterations: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tolerance: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            max_iterations: 100,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

/// Index of the nearest centroid; ties go to the lower index.
pub fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(point, centroid);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

fn plus_plus_seeds<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            // All remaining points coincide with a centroid.
            rng.random_range(0..points.len())
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// Clusters `points` into `k` groups (clamped to the number of points).
/// At return every non-empty cluster's centroid is the mean of its members.
pub fn kmeans<R: Rng>(points: &[Vec<f64>], k: usize, cfg: &KMeansConfig, rng: &mut R) -> KMeans {
    let k = k.min(points.len());
    if k == 0 {
        return KMeans {
            centroids: Vec::new(),
            assignments: Vec::new(),
            iterations: 0,
            converged: true,
        };
    }
    let dim = points[0].len();
    let mut centroids = plus_plus_seeds(points, k, rng);
    let mut assignments = vec![0; points.len()];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let mut moved = iterations == 1;
        for (i, p) in points.iter().enumerate() {
            let a = nearest_centroid(p, &centroids);
            moved |= a != assignments[i];
            assignments[i] = a;
        }
        if !moved {
            // Centroids are the means of these same assignments: a fixed point.
            converged = true;
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mean: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(squared_distance(&mean, &centroids[c]).sqrt());
            centroids[c] = mean;
        }
        if shift < cfg.tolerance {
            converged = true;
            break;
        }
    }
    KMeans {
        centroids,
        assignments,
        iterations,
        converged,
    }
}
