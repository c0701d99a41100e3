//! Mini-batch k-means (k-means++ seeding, per-center learning rates)
//! finished with one full-batch Lloyd step.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::OpenMaxError;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centers: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia of the k-means++ seeding, for reference.
    pub initial_inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Sum of squared distances to the nearest center.
pub fn inertia(points: &[Vec<f64>], centers: &[Vec<f64>]) -> f64 {
    points.iter().map(|p| nearest(p, centers).1).sum()
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut chosen = vec![false; points.len()];
    let first = rng.gen_range(0..points.len());
    chosen[first] = true;
    let mut centers = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, d) in d2.iter().enumerate() {
                if *d > 0.0 {
                    pick = Some(i);
                    if target < *d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total")
        } else {
            // every point coincides with a center: take any unused index
            let free: Vec<usize> = (0..points.len()).filter(|i| !chosen[*i]).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen[idx] = true;
        centers.push(points[idx].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[idx]));
        }
    }
    centers
}

fn lloyd_step(points: &[Vec<f64>], centers: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = centers[0].len();
    let mut sums = vec![vec![0.0; dim]; centers.len()];
    let mut counts = vec![0usize; centers.len()];
    for p in points {
        let (c, _) = nearest(p, centers);
        counts[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(p) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .zip(centers)
        .map(|((sum, n), old)| {
            if n == 0 {
                old.clone()
            } else {
                sum.into_iter().map(|s| s / n as f64).collect()
            }
        })
        .collect()
}

pub fn minibatch_kmeans(
    points: &[Vec<f64>],
    k: usize,
    batch_size: usize,
    iterations: usize,
    seed: u64,
) -> Result<KMeansFit, OpenMaxError> {
    if k == 0 {
        return Err(OpenMaxError::InvalidParameter("k must be >= 1".into()));
    }
    if points.len() < k {
        return Err(OpenMaxError::TooFewPoints {
            needed: k,
            got: points.len(),
        });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(OpenMaxError::InvalidParameter("points differ in dimension".into()));
    }
    let mut rng = seed::stream_rng(seed, 30);
    let init = plus_plus(points, k, &mut rng);
    let initial_inertia = inertia(points, &init);

    let mut centers = init.clone();
    let mut counts = vec![0u64; k];
    let batch_size = batch_size.max(1);
    for _ in 0..iterations {
        let batch: Vec<usize> = (0..batch_size).map(|_| rng.gen_range(0..points.len())).collect();
        let assigned: Vec<usize> = batch.iter().map(|&i| nearest(&points[i], &centers).0).collect();
        for (&i, &c) in batch.iter().zip(&assigned) {
            counts[c] += 1;
            let eta = 1.0 / counts[c] as f64;
            for (cv, pv) in centers[c].iter_mut().zip(&points[i]) {
                *cv = (1.0 - eta) * *cv + eta * pv;
            }
        }
    }
    centers = lloyd_step(points, &centers);
    let mut final_inertia = inertia(points, &centers);
    if final_inertia > initial_inertia {
        centers = lloyd_step(points, &init);
        final_inertia = inertia(points, &centers);
    }
    Ok(KMeansFit {
        centers,
        inertia: final_inertia,
        initial_inertia,
    })
}
