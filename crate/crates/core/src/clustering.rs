//! Speaker-count estimation and clustering: k-means++ with Lloyd iterations,
//! a spherical-Gaussian BIC score, and x-means splitting with a forced
//! minimum of 2 clusters.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Default cap on the cluster count searched by x-means.
pub fn default_k_max(n: usize) -> usize {
    n.min(10)
}

/// A clustering of n points into k non-empty clusters.
#[derive(Debug, Clone)]
pub struct ClusterResult {
    /// Cluster index per point, in `[0, k)`.
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared point-to-centroid distances.
    pub inertia: f64,
    pub k: usize,
    /// Inertia after each Lloyd iteration (non-increasing).
    pub inertia_per_iter: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    (best, best_d)
}

/// k-means++ seeding: first centroid uniform, the rest proportional to the
/// squared distance to the nearest chosen centroid.
fn plusplus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();

    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total <= 0.0 {
            // all remaining points coincide with a centroid: pick any unchosen
            (0..n).find(|&i| !chosen[i]).unwrap_or(0)
        } else {
            let mut u = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        };
        chosen[idx] = true;
        centroids.push(points[idx].clone());
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, centroids.last().unwrap());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

/// Lloyd iterations from given initial centroids, with empty-cluster repair
/// (the point farthest from its centroid is moved into the empty cluster).
fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iter: usize) -> ClusterResult {
    let n = points.len();
    let k = centroids.len();
    let dim = points[0].len();
    let mut labels = vec![0usize; n];
    let mut inertia_per_iter = Vec::new();
    let mut prev_labels: Option<Vec<usize>> = None;

    for _ in 0..max_iter {
        // assignment
        let mut dists = vec![0.0f64; n];
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            labels[i] = j;
            dists[i] = d;
        }

        // repair empty clusters with the worst-fit points
        let mut sizes = vec![0usize; k];
        for &l in &labels {
            sizes[l] += 1;
        }
        for j in 0..k {
            while sizes[j] == 0 {
                let far = (0..n)
                    .filter(|&i| sizes[labels[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]))
                    .expect("some cluster has more than one point");
                sizes[labels[far]] -= 1;
                labels[far] = j;
                sizes[j] += 1;
                dists[far] = 0.0;
            }
        }

        // update
        let mut sums = vec![vec![0.0f64; dim]; k];
        for (p, &l) in points.iter().zip(&labels) {
            for (s, &v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            for s in &mut sums[j] {
                *s /= sizes[j] as f64;
            }
        }
        centroids = sums;

        let inertia: f64 = points
            .iter()
            .zip(&labels)
            .map(|(p, &l)| sq_dist(p, &centroids[l]))
            .sum();
        inertia_per_iter.push(inertia);

        if prev_labels.as_deref() == Some(&labels) {
            break;
        }
        prev_labels = Some(labels.clone());
    }

    let inertia = *inertia_per_iter.last().unwrap();
    ClusterResult {
        labels,
        centroids,
        inertia,
        k,
        inertia_per_iter,
    }
}

fn kmeans_with_rng(
    points: &[Vec<f64>],
    k: usize,
    rng: &mut ChaCha8Rng,
    max_iter: usize,
) -> ClusterResult {
    let init = plusplus_init(points, k, rng);
    lloyd(points, init, max_iter)
}

/// k-means++ seeded Lloyd clustering into exactly `k` clusters.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<ClusterResult> {
    if points.is_empty() {
        return Err(Error::Argument("no points to cluster".into()));
    }
    if k < 2 || k > points.len() {
        return Err(Error::Argument(format!(
            "k must satisfy 2 <= k <= {}, got {k}",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(kmeans_with_rng(points, k, &mut rng, max_iter))
}

/// Spherical-Gaussian BIC of a clustering (identical variance across
/// clusters). Larger is better. Returns +inf when the fit is exact
/// (zero residual variance).
pub fn bic_score(points: &[Vec<f64>], result: &ClusterResult) -> Result<f64> {
    let n = points.len();
    let k = result.k;
    if n <= k {
        return Err(Error::Argument(format!(
            "BIC needs more points than clusters: n={n}, k={k}"
        )));
    }
    let dim = points[0].len() as f64;
    let nf = n as f64;
    let kf = k as f64;

    let variance = result.inertia / ((nf - kf) * dim);
    if variance <= 0.0 {
        return Ok(f64::INFINITY);
    }

    let mut sizes = vec![0usize; k];
    for &l in &result.labels {
        sizes[l] += 1;
    }
    let mixing: f64 = sizes
        .iter()
        .map(|&c| {
            let cf = c as f64;
            cf * (cf / nf).ln()
        })
        .sum();
    let log_likelihood = mixing
        - (nf * dim / 2.0) * (2.0 * std::f64::consts::PI * variance).ln()
        - (nf - kf) * dim / 2.0;
    let free_params = (kf - 1.0) + kf * dim + 1.0;
    Ok(log_likelihood - (free_params / 2.0) * nf.ln())
}

/// Dominant direction of a point cloud around `centroid`, by power iteration
/// on the (implicit) covariance. Used to seed 2-means children.
fn principal_direction(points: &[&Vec<f64>], centroid: &[f64]) -> Vec<f64> {
    let dim = centroid.len();
    // start from the offset of the farthest member; generic enough to
    // overlap the dominant eigenvector
    let far = points
        .iter()
        .max_by(|a, b| sq_dist(a, centroid).total_cmp(&sq_dist(b, centroid)))
        .expect("non-empty cluster");
    let mut v: Vec<f64> = far.iter().zip(centroid).map(|(x, c)| x - c).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        let mut e0 = vec![0.0; dim];
        e0[0] = 1.0;
        return e0;
    }
    v.iter_mut().for_each(|x| *x /= norm);

    for _ in 0..50 {
        let mut w = vec![0.0; dim];
        for p in points {
            let offset: Vec<f64> = p.iter().zip(centroid).map(|(x, c)| x - c).collect();
            let proj: f64 = offset.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (wi, oi) in w.iter_mut().zip(&offset) {
                *wi += proj * oi;
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            break;
        }
        w.iter_mut().for_each(|x| *x /= norm);
        v = w;
    }
    v
}

fn centroid_of(points: &[&Vec<f64>]) -> Vec<f64> {
    let dim = points[0].len();
    let mut c = vec![0.0; dim];
    for p in points {
        for (ci, &x) in c.iter_mut().zip(p.iter()) {
            *ci += x;
        }
    }
    c.iter_mut().for_each(|x| *x /= points.len() as f64);
    c
}

fn single_cluster_result(points: &[&Vec<f64>]) -> ClusterResult {
    let centroid = centroid_of(points);
    let inertia: f64 = points.iter().map(|p| sq_dist(p, &centroid)).sum();
    ClusterResult {
        labels: vec![0; points.len()],
        centroids: vec![centroid],
        inertia,
        k: 1,
        inertia_per_iter: vec![inertia],
    }
}

/// x-means: start at `k_min` clusters and recursively split any cluster whose
/// local 2-means children improve the local BIC, up to `k_max`; then refine
/// with a full k-means at the selected count. `k_min >= 2` enforces the
/// minimum speaker count.
pub fn xmeans(points: &[Vec<f64>], k_min: usize, k_max: usize, seed: u64) -> Result<ClusterResult> {
    if points.is_empty() {
        return Err(Error::Argument("no points to cluster".into()));
    }
    if k_min < 2 || k_min > k_max || k_max > points.len() {
        return Err(Error::Argument(format!(
            "need 2 <= k_min <= k_max <= {}, got k_min={k_min} k_max={k_max}",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial = kmeans_with_rng(points, k_min, &mut rng, 100);

    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); k_min];
    for (i, &l) in initial.labels.iter().enumerate() {
        clusters[l].push(i);
    }

    loop {
        let mut next: Vec<Vec<usize>> = Vec::new();
        let mut accepted = 0usize;
        let current_k = clusters.len();
        for members in &clusters {
            let k_now = current_k + accepted;
            if members.len() < 3 || k_now >= k_max {
                next.push(members.clone());
                continue;
            }
            let member_points: Vec<&Vec<f64>> = members.iter().map(|&i| &points[i]).collect();
            let parent = single_cluster_result(&member_points);
            let owned: Vec<Vec<f64>> = member_points.iter().map(|p| (*p).clone()).collect();
            let parent_bic = bic_score(&owned, &parent)?;

            // children seeded at centroid +- sqrt(2 var) along the principal direction
            let centroid = &parent.centroids[0];
            let direction = principal_direction(&member_points, centroid);
            let delta = (2.0 * parent.inertia / members.len() as f64).sqrt();
            let child_a: Vec<f64> = centroid
                .iter()
                .zip(&direction)
                .map(|(c, u)| c + delta * u)
                .collect();
            let child_b: Vec<f64> = centroid
                .iter()
                .zip(&direction)
                .map(|(c, u)| c - delta * u)
                .collect();
            let split = lloyd(&owned, vec![child_a, child_b], 100);
            let split_bic = bic_score(&owned, &split)?;

            if split_bic > parent_bic {
                let mut left = Vec::new();
                let mut right = Vec::new();
                for (local, &global) in members.iter().enumerate() {
                    if split.labels[local] == 0 {
                        left.push(global);
                    } else {
                        right.push(global);
                    }
                }
                next.push(left);
                next.push(right);
                accepted += 1;
            } else {
                next.push(members.clone());
            }
        }
        clusters = next;
        if accepted == 0 || clusters.len() >= k_max {
            break;
        }
    }

    let k = clusters.len().min(k_max);
    Ok(kmeans_with_rng(points, k, &mut rng, 100))
}
