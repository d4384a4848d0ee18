//! Lloyd's k-means with k-means++ seeding.
//!
//! Squared Euclidean distance, assignment ties go to the lowest centroid
//! index, and an emptied cluster keeps its previous centroid. When the data
//! holds fewer distinct points than `k`, seeding duplicates existing points
//! and sets [`KMeansResult::duplicated`].
//!
//! A single Lloyd run from a k-means++ seeding stops in a poor local optimum
//! surprisingly often on small inputs. Each run therefore finishes with
//! Hartigan single-point transfers, and the result is the best of
//! `restarts` seeded runs (earliest run wins ties).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HpanError, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const DEFAULT_MAX_ITERS: usize = 50;
pub const DEFAULT_RESTARTS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult<T> {
    pub centroids: Matrix<T>,
    pub assignment: Vec<usize>,
    pub objective: T,
    /// Objective after seeding, after every Lloyd iteration and after the
    /// transfer pass (when it moved anything), for the run that was kept.
    pub objective_trace: Vec<T>,
    pub iterations: usize,
    pub duplicated: bool,
}

#[inline]
fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

fn assign<T: Scalar>(points: &Matrix<T>, centroids: &Matrix<T>, out: &mut [usize]) -> T {
    let mut total = T::zero();
    for (i, p) in points.row_iter().enumerate() {
        let mut best = 0;
        let mut best_d = T::infinity();
        for (c, cent) in centroids.row_iter().enumerate() {
            let d = sq_dist(p, cent);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        out[i] = best;
        total += best_d;
    }
    total
}

fn update<T: Scalar>(points: &Matrix<T>, assignment: &[usize], centroids: &mut Matrix<T>) {
    let k = centroids.rows();
    let mut sums = Matrix::<T>::zeros(k, points.cols());
    let mut counts = vec![0usize; k];
    for (p, &c) in points.row_iter().zip(assignment) {
        counts[c] += 1;
        for (s, &v) in sums.row_mut(c).iter_mut().zip(p) {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let inv = T::one() / T::of_usize(n);
        for (dst, &s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
            *dst = s * inv;
        }
    }
}

/// Draws an index with probability proportional to `weights`; `None` when
/// all weights are zero.
fn sample_weighted(weights: &[f64], rng: &mut ChaCha8Rng) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut r = rng.random_range(0.0..total);
    let mut pick = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            pick = Some(i);
            if r < w {
                break;
            }
            r -= w;
        }
    }
    pick
}

/// Single-point transfers (Hartigan's rule) from a Lloyd fixpoint. Moving `x`
/// from cluster `a` (size `n_a >= 2`) to `b` changes the objective by
/// `n_b / (n_b + 1) |x - c_b|^2 - n_a / (n_a - 1) |x - c_a|^2`; the best
/// negative move is applied and both means are updated exactly. Every move
/// strictly lowers the objective and the end state is again a Lloyd
/// fixpoint. Returns whether anything moved.
fn hartigan<T: Scalar>(points: &Matrix<T>, assignment: &mut [usize], centroids: &mut Matrix<T>) -> bool {
    let k = centroids.rows();
    let mut counts = vec![0usize; k];
    for &a in assignment.iter() {
        counts[a] += 1;
    }
    let tol = T::of(1e-12);
    let mut moved_any = false;
    for _ in 0..DEFAULT_MAX_ITERS {
        let mut moved = false;
        for (i, x) in points.row_iter().enumerate() {
            let a = assignment[i];
            let na = counts[a];
            if na < 2 {
                continue;
            }
            let remove = T::of_usize(na) / T::of_usize(na - 1) * sq_dist(x, centroids.row(a));
            let mut best = None;
            let mut best_delta = -tol * (T::one() + remove);
            for b in (0..k).filter(|&b| b != a) {
                let nb = counts[b];
                let add = T::of_usize(nb) / T::of_usize(nb + 1) * sq_dist(x, centroids.row(b));
                let delta = add - remove;
                if delta < best_delta {
                    best_delta = delta;
                    best = Some(b);
                }
            }
            if let Some(b) = best {
                let nb = counts[b];
                let fa = T::of_usize(na - 1);
                let fb = T::of_usize(nb + 1);
                for (c, &v) in centroids.row_mut(a).iter_mut().zip(x) {
                    *c = (*c * T::of_usize(na) - v) / fa;
                }
                for (c, &v) in centroids.row_mut(b).iter_mut().zip(x) {
                    *c = (*c * T::of_usize(nb) + v) / fb;
                }
                counts[a] -= 1;
                counts[b] += 1;
                assignment[i] = b;
                moved = true;
                moved_any = true;
            }
        }
        if !moved {
            break;
        }
    }
    if moved_any {
        // Refresh the means from scratch to drop incremental rounding.
        update(points, assignment, centroids);
    }
    moved_any
}

/// Greedy k-means++: each new centre is the best of `2 + ln k` D^2-weighted
/// candidates, judged by the potential it leaves behind.
fn seed_plus_plus<T: Scalar>(points: &Matrix<T>, k: usize, rng: &mut ChaCha8Rng) -> (Matrix<T>, bool) {
    let m = points.rows();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut chosen = Vec::with_capacity(k);
    let mut duplicated = false;
    chosen.push(rng.random_range(0..m));
    let mut d2: Vec<f64> = points
        .row_iter()
        .map(|p| sq_dist(p, points.row(chosen[0])).to_f64_lossy())
        .collect();
    while chosen.len() < k {
        let Some(first) = sample_weighted(&d2, rng) else {
            duplicated = true;
            chosen.push(rng.random_range(0..m));
            continue;
        };
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for t in 0..trials {
            let cand = if t == 0 {
                first
            } else {
                sample_weighted(&d2, rng).unwrap_or(first)
            };
            let next_d2: Vec<f64> = points
                .row_iter()
                .zip(&d2)
                .map(|(p, &d)| d.min(sq_dist(p, points.row(cand)).to_f64_lossy()))
                .collect();
            let pot: f64 = next_d2.iter().sum();
            if best.as_ref().is_none_or(|b| pot < b.0) {
                best = Some((pot, cand, next_d2));
            }
        }
        let (_, cand, next_d2) = best.expect("at least one trial");
        chosen.push(cand);
        d2 = next_d2;
    }
    (points.select_rows(&chosen), duplicated)
}

/// Clusters the rows of `points` into `k` centroids.
pub fn kmeans<T: Scalar>(points: &Matrix<T>, k: usize, seed: u64) -> Result<KMeansResult<T>> {
    kmeans_with(points, k, seed, DEFAULT_MAX_ITERS, DEFAULT_RESTARTS)
}

pub fn kmeans_with<T: Scalar>(
    points: &Matrix<T>,
    k: usize,
    seed: u64,
    max_iters: usize,
    restarts: usize,
) -> Result<KMeansResult<T>> {
    if k == 0 {
        return Err(HpanError::KMeans("k must be >= 1".into()));
    }
    if points.rows() == 0 {
        return Err(HpanError::KMeans("no points to cluster".into()));
    }
    if !points.is_finite() {
        return Err(HpanError::KMeans("points contain non-finite values".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = lloyd(points, k, max_iters, &mut rng);
    for _ in 1..restarts.max(1) {
        if best.objective == T::zero() {
            break;
        }
        let run = lloyd(points, k, max_iters, &mut rng);
        if run.objective < best.objective {
            best = run;
        }
    }
    Ok(best)
}

fn lloyd<T: Scalar>(points: &Matrix<T>, k: usize, max_iters: usize, rng: &mut ChaCha8Rng) -> KMeansResult<T> {
    let (mut centroids, duplicated) = seed_plus_plus(points, k, rng);
    let mut assignment = vec![0usize; points.rows()];
    let mut objective = assign(points, &centroids, &mut assignment);
    let mut trace = vec![objective];
    let mut iterations = 0;
    let mut next = vec![0usize; points.rows()];
    while iterations < max_iters {
        iterations += 1;
        update(points, &assignment, &mut centroids);
        objective = assign(points, &centroids, &mut next);
        trace.push(objective);
        if next == assignment {
            break;
        }
        std::mem::swap(&mut assignment, &mut next);
    }
    if hartigan(points, &mut assignment, &mut centroids) {
        objective = assign(points, &centroids, &mut assignment);
        trace.push(objective);
    }
    KMeansResult {
        centroids,
        assignment,
        objective,
        objective_trace: trace,
        iterations,
        duplicated,
    }
}
