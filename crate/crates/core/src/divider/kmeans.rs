//! Lloyd's k-means with k-means++ seeding; the cluster-based dividing baseline.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::micrograd::Matrix;
use crate::rng;

pub const MAX_ITERATIONS: usize = 100;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Matrix,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    pub iterations: usize,
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        let d0 = x[0] - y[0];
        let d1 = x[1] - y[1];
        let d2 = x[2] - y[2];
        let d3 = x[3] - y[3];
        acc[0] += d0 * d0;
        acc[1] += d1 * d1;
        acc[2] += d2 * d2;
        acc[3] += d3 * d3;
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += (x - y) * (x - y);
    }
    s
}

fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.iter_rows().enumerate() {
        let d = sq_dist(point, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(features: &Matrix, k: usize, r: &mut rng::Rng) -> Matrix {
    let n = features.rows();
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let first = r.random_range(0..n);
    chosen.push(first);
    taken[first] = true;
    let mut d2: Vec<f64> = features
        .iter_rows()
        .map(|x| sq_dist(x, features.row(first)))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = r.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave target just above the final partial sum
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // every remaining point coincides with a chosen centre
            let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
            free[r.random_range(0..free.len())]
        };
        chosen.push(next);
        taken[next] = true;
        for (i, x) in features.iter_rows().enumerate() {
            let d = sq_dist(x, features.row(next));
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    features.gather_rows(&chosen)
}

/// Clusters the rows of `features` into `k` groups. Deterministic in `seed`.
pub fn kmeans(features: &Matrix, k: usize, seed: u64) -> Result<KMeans> {
    let n = features.rows();
    if k == 0 {
        return Err(Error::Config("k-means needs at least one cluster".into()));
    }
    if n < k {
        return Err(Error::InsufficientInstances {
            needed: k,
            available: n,
        });
    }
    let d = features.cols();
    let mut r = rng::seeded(seed);
    let mut centroids = plus_plus_init(features, k, &mut r);
    let mut labels = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    let mut iterations = 0;

    for _ in 0..MAX_ITERATIONS {
        iterations += 1;
        for (i, x) in features.iter_rows().enumerate() {
            let (c, dd) = nearest(x, &centroids);
            labels[i] = c;
            dists[i] = dd;
        }
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (x, &c) in features.iter_rows().zip(&labels) {
            counts[c] += 1;
            for (s, &v) in sums.row_mut(c).iter_mut().zip(x) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for (c, count) in counts.iter_mut().enumerate() {
            if *count == 0 {
                // re-seed an empty cluster at the worst-fit point
                let far = dists
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                    .0;
                dists[far] = 0.0;
                sums.row_mut(c).copy_from_slice(features.row(far));
                *count = 1;
            }
            let inv = 1.0 / *count as f64;
            sums.row_mut(c).iter_mut().for_each(|s| *s *= inv);
            shift = shift.max(sq_dist(sums.row(c), centroids.row(c)).sqrt());
        }
        centroids = sums;
        if shift < TOLERANCE {
            break;
        }
    }

    let mut inertia = 0.0;
    for (i, x) in features.iter_rows().enumerate() {
        let (c, dd) = nearest(x, &centroids);
        labels[i] = c;
        inertia += dd;
    }
    Ok(KMeans {
        labels,
        centroids,
        inertia,
        iterations,
    })
}

/// Cluster ids only.
pub fn kmeans_cluster(features: &Matrix, l: usize, seed: u64) -> Result<Vec<usize>> {
    Ok(kmeans(features, l, seed)?.labels)
}
