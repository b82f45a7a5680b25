//! Lloyd's algorithm with k-means++ seeding, and the level-by-level residual
//! variant that produces a [`Codebook`].

use rand::Rng;

use super::codebook::Codebook;
use crate::error::{Error, Result};
use crate::rng;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the closest centroid; ties go to the lowest index.
pub fn nearest(centroids: &[f64], dim: usize, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(row, x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// `[k, dim]`.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the nearest centroid: entry 0 for the seeds,
    /// then one entry per Lloyd iteration.
    pub sse_history: Vec<f64>,
    /// Number of distinct input points when that was below `k`; the trailing
    /// centroids then repeat the last distinct one and are never selected.
    pub reduced_k: Option<usize>,
}

fn count_distinct(data: &[f64], dim: usize, cap: usize) -> usize {
    let mut rows: Vec<Vec<u64>> = data
        .chunks_exact(dim)
        .map(|r| r.iter().map(|v| v.to_bits()).collect())
        .collect();
    rows.sort_unstable();
    rows.dedup();
    rows.len().min(cap)
}

fn seed_plus_plus<R: Rng>(data: &[f64], dim: usize, k: usize, r: &mut R) -> Vec<f64> {
    let n = data.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = r.random_range(0..n);
    centroids.extend_from_slice(&data[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = data
        .chunks_exact(dim)
        .map(|x| sq_dist(x, &centroids[..dim]))
        .collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = r.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 && target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        // guard against landing on a zero-weight tail through rounding
        if d2[pick] <= 0.0 {
            pick = d2.iter().rposition(|&w| w > 0.0).expect("positive total");
        }
        let c = data[pick * dim..(pick + 1) * dim].to_vec();
        for (i, x) in data.chunks_exact(dim).enumerate() {
            d2[i] = d2[i].min(sq_dist(x, &c));
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

fn assign(data: &[f64], dim: usize, centroids: &[f64], out: &mut [usize]) -> f64 {
    let mut sse = 0.0;
    for (i, x) in data.chunks_exact(dim).enumerate() {
        let (c, d) = nearest(centroids, dim, x);
        out[i] = c;
        sse += d;
    }
    sse
}

/// K-means over the rows of `data` (`[n, dim]`, row-major).
///
/// Empty clusters are re-seeded with the point farthest from its current
/// centroid, which keeps the SSE non-increasing.
pub fn kmeans<R: Rng>(data: &[f64], dim: usize, k: usize, iters: usize, r: &mut R) -> Result<KMeansResult> {
    if dim == 0 || data.is_empty() || data.len() % dim != 0 {
        return Err(Error::invalid("k-means input must be a non-empty [n, dim] matrix"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    let n = data.len() / dim;
    let distinct = count_distinct(data, dim, k);
    let k_eff = distinct.min(k);
    let mut centroids = seed_plus_plus(data, dim, k_eff, r);
    let k_eff = centroids.len() / dim;
    let mut assignments = vec![0usize; n];
    let mut sse_history = vec![assign(data, dim, &centroids, &mut assignments)];
    for _ in 0..iters {
        let mut sums = vec![0.0; k_eff * dim];
        let mut counts = vec![0usize; k_eff];
        for (i, x) in data.chunks_exact(dim).enumerate() {
            let c = assignments[i];
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                *s += v;
            }
        }
        for c in 0..k_eff {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
        let empty: Vec<usize> = (0..k_eff).filter(|&c| counts[c] == 0).collect();
        if !empty.is_empty() {
            let mut dist: Vec<f64> = data
                .chunks_exact(dim)
                .enumerate()
                .map(|(i, x)| sq_dist(x, &centroids[assignments[i] * dim..(assignments[i] + 1) * dim]))
                .collect();
            for c in empty {
                let far = dist
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc })
                    .0;
                centroids[c * dim..(c + 1) * dim].copy_from_slice(&data[far * dim..(far + 1) * dim]);
                assignments[far] = c;
                dist[far] = 0.0;
            }
        }
        let before = assignments.clone();
        let sse = assign(data, dim, &centroids, &mut assignments);
        sse_history.push(sse);
        if before == assignments {
            break;
        }
    }
    let reduced_k = (k_eff < k).then_some(k_eff);
    if k_eff < k {
        let last = centroids[(k_eff - 1) * dim..k_eff * dim].to_vec();
        for _ in k_eff..k {
            centroids.extend_from_slice(&last);
        }
    }
    Ok(KMeansResult {
        centroids,
        assignments,
        sse_history,
        reduced_k,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RqKMeansTrace {
    /// Lloyd SSE history for every level.
    pub sse: Vec<Vec<f64>>,
    /// Mean residual norm before level 0 (the inputs) and after every level.
    pub mean_residual_norm: Vec<f64>,
    pub reduced_k: Vec<Option<usize>>,
}

/// Residual k-means: level `l` clusters the residuals left by levels `< l`.
pub fn train_rq_kmeans(
    embeddings: &[f64],
    dim: usize,
    n_levels: usize,
    k: usize,
    lloyd_iters: usize,
    seed: u64,
    beta_commit: f64,
) -> Result<(Codebook, RqKMeansTrace)> {
    let mut r = rng::stream(seed, rng::KMEANS);
    let mut residual = embeddings.to_vec();
    let mut levels = Vec::with_capacity(n_levels);
    let mut trace = RqKMeansTrace::default();
    let mean_norm = |res: &[f64]| {
        let n = res.len() / dim;
        res.chunks_exact(dim).map(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / n as f64
    };
    trace.mean_residual_norm.push(mean_norm(&residual));
    for _ in 0..n_levels {
        let km = kmeans(&residual, dim, k, lloyd_iters, &mut r)?;
        for (x, &c) in residual.chunks_exact_mut(dim).zip(&km.assignments) {
            for (v, m) in x.iter_mut().zip(&km.centroids[c * dim..(c + 1) * dim]) {
                *v -= m;
            }
        }
        trace.mean_residual_norm.push(mean_norm(&residual));
        trace.sse.push(km.sse_history);
        trace.reduced_k.push(km.reduced_k);
        levels.push(km.centroids);
    }
    let cb = Codebook::new(levels, k, dim, beta_commit)?;
    Ok((cb, trace))
}
