use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAX_ITERS: usize = 100;

#[derive(Clone, Debug)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    /// `[k × F]`
    pub centroids: Tensor,
    /// Sum of squared distances after each assignment pass.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (first on ties) and its squared distance.
fn nearest(x: &[f64], centroids: &[f64], f: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.chunks(f).enumerate() {
        let d = sq_dist(x, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations on the rows of `x: [N × F]`.
pub fn kmeans(x: &Tensor, k: usize, seed: u64) -> Result<KMeans> {
    if x.ndim() != 2 {
        return Err(Error::Shape(format!("k-means input must be [N x F], got {:?}", x.shape())));
    }
    let (n, f) = (x.dim(0), x.dim(1));
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!("cannot form {k} clusters from {n} points")));
    }
    let rows: Vec<&[f64]> = x.data().chunks(f.max(1)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = Vec::with_capacity(k * f);
    centroids.extend_from_slice(rows[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centroids[..f])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.extend_from_slice(rows[pick]);
        let c = &centroids[centroids.len() - f..];
        for (d, r) in d2.iter_mut().zip(&rows) {
            *d = d.min(sq_dist(r, c));
        }
    }

    let mut assignments = vec![usize::MAX; n];
    let mut objective = Vec::new();
    let mut iterations = 0;
    for _ in 0..MAX_ITERS {
        iterations += 1;
        let mut changed = false;
        let mut obj = 0.0;
        let mut dist = vec![0.0; n];
        for (i, r) in rows.iter().enumerate() {
            let (c, d) = nearest(r, &centroids, f);
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
            dist[i] = d;
            obj += d;
        }
        objective.push(obj);
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * f];
        let mut counts = vec![0usize; k];
        for (r, &c) in rows.iter().zip(&assignments) {
            counts[c] += 1;
            for (s, v) in sums[c * f..(c + 1) * f].iter_mut().zip(*r) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (mu, s) in centroids[c * f..(c + 1) * f].iter_mut().zip(&sums[c * f..(c + 1) * f]) {
                    *mu = s / counts[c] as f64;
                }
                continue;
            }
            // empty cluster: move it onto the point worst served by its centroid
            let far = (0..n)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                .expect("n >= k >= 1");
            centroids[c * f..(c + 1) * f].copy_from_slice(rows[far]);
            dist[far] = 0.0;
            assignments[far] = c;
        }
    }
    Ok(KMeans {
        assignments,
        centroids: Tensor::new(vec![k, f], centroids)?,
        objective,
        iterations,
    })
}
