//! Lloyd's k-means with k-means++ seeding, used to initialise codebooks.

use crate::error::{Error, Result};
use crate::numeric::{squared_distance, Matrix, Rng};

/// Standard deviation of the jitter added to duplicated centroids.
pub const PAD_JITTER: f64 = 1e-3;

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn plus_plus_seeds(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.index(points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.index(points.len())
        };
        let c = points[pick].clone();
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(squared_distance(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// `k` centroids of `points` after `iters` Lloyd iterations.
///
/// With fewer points than `k`, clustering runs with `k = points.len()` and the
/// result is padded by cycling through the centroids with Gaussian jitter of
/// std [`PAD_JITTER`]. Empty clusters keep their previous centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, rng: &mut Rng) -> Result<Matrix> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("k-means needs at least one point".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k-means needs k >= 1".into()));
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::shape("kmeans point", dim, p.len()));
    }

    let k_eff = k.min(points.len());
    let mut centroids = plus_plus_seeds(points, k_eff, rng);
    let mut assignment = vec![usize::MAX; points.len()];
    for _ in 0..iters {
        let mut changed = false;
        for (p, a) in points.iter().zip(assignment.iter_mut()) {
            let (best, _) = nearest(p, &centroids);
            changed |= *a != best;
            *a = best;
        }
        let mut sums = vec![vec![0.0; dim]; k_eff];
        let mut counts = vec![0usize; k_eff];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }

    let mut rows = centroids.clone();
    for j in k_eff..k {
        let base = &centroids[j % k_eff];
        rows.push(base.iter().map(|v| v + PAD_JITTER * rng.normal()).collect());
    }
    Matrix::from_rows(&rows)
}
