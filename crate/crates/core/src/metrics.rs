//! Embedding quality metrics: clustering NMI, Recall@K and accuracy.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use crate::ann::all_knn;
use crate::error::{Error, Result};
use crate::kernel::squared_distance;
use crate::rng::{stream_rng, Stream};

pub const KMEANS_MAX_ITERATIONS: usize = 300;
pub const KMEANS_RESTARTS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub assignments: Vec<usize>,
    pub cluster_count: usize,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
}

fn nearest(point: &[f64], centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.outer_iter().enumerate() {
        let d = squared_distance(point, row.as_slice().expect("standard layout"));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seeds(points: ArrayView2<'_, f64>, k: usize, rng: &mut impl Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(row(points, i), row(points, chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            // All remaining points coincide with a seed.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(row(points, i), row(points, next)));
        }
    }
    points.select(Axis(0), &chosen).as_standard_layout().into_owned()
}

fn row<'a>(points: ArrayView2<'a, f64>, i: usize) -> &'a [f64] {
    let d = points.ncols();
    &points.to_slice().expect("standard layout")[i * d..(i + 1) * d]
}

fn lloyd(points: ArrayView2<'_, f64>, mut centroids: Array2<f64>) -> ClusterAssignment {
    let (n, k) = (points.nrows(), centroids.nrows());
    let mut assignments = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    for _ in 0..KMEANS_MAX_ITERATIONS {
        let mut changed = false;
        for i in 0..n {
            let (c, d) = nearest(row(points, i), &centroids);
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
            dists[i] = d;
        }
        // Reseed empty clusters at the currently worst-served point.
        let mut counts = vec![0usize; k];
        assignments.iter().for_each(|&a| counts[a] += 1);
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[assignments[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("k <= n leaves a shared cluster");
                counts[assignments[far]] -= 1;
                assignments[far] = c;
                counts[c] = 1;
                dists[far] = 0.0;
                changed = true;
            }
        }
        centroids.fill(0.0);
        for (i, &a) in assignments.iter().enumerate() {
            let mut target = centroids.row_mut(a);
            target += &points.row(i);
        }
        for (c, mut r) in centroids.outer_iter_mut().enumerate() {
            r /= counts[c] as f64;
        }
        if !changed {
            break;
        }
    }
    let inertia = (0..n)
        .map(|i| {
            squared_distance(
                row(points, i),
                centroids.row(assignments[i]).as_slice().expect("standard layout"),
            )
        })
        .sum();
    ClusterAssignment {
        assignments,
        cluster_count: k,
        inertia,
    }
}

/// One k-means++ seeded Lloyd run.
pub fn kmeans(points: ArrayView2<'_, f64>, k: usize, seed: u64) -> Result<ClusterAssignment> {
    kmeans_restarts(points, k, seed, 1)
}

/// Lowest-inertia result of `restarts` seeded runs.
pub fn kmeans_restarts(points: ArrayView2<'_, f64>, k: usize, seed: u64, restarts: usize) -> Result<ClusterAssignment> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::input(format!("k-means needs 1 <= k <= n, got k={k}, n={n}")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means input"));
    }
    let points = points.as_standard_layout();
    let mut rng = stream_rng(seed, Stream::KMeans);
    let mut best: Option<ClusterAssignment> = None;
    for _ in 0..restarts.max(1) {
        let seeds = plus_plus_seeds(points.view(), k, &mut rng);
        let run = lloyd(points.view(), seeds);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information over the arithmetic mean of the two entropies.
/// Returns 0 when both partitions are trivial.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let n = a.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ca: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let ha = entropy(ca.values().copied(), n);
    let hb = entropy(cb.values().copied(), n);
    let mut mi = 0.0;
    for (&(x, y), &c) in &joint {
        let pxy = c as f64 / n;
        let px = ca[&x] as f64 / n;
        let py = cb[&y] as f64 / n;
        mi += pxy * (pxy / (px * py)).ln();
    }
    let denom = 0.5 * (ha + hb);
    if denom <= 0.0 {
        return Ok(0.0);
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

/// Clusters with k = number of distinct labels (best of
/// [`KMEANS_RESTARTS`]) and scores the clustering against the labels.
pub fn clustering_nmi(embeddings: ArrayView2<'_, f64>, labels: &[usize], seed: u64) -> Result<f64> {
    let k = labels.iter().collect::<BTreeSet<_>>().len();
    let clusters = kmeans_restarts(embeddings, k, seed, KMEANS_RESTARTS)?;
    nmi(&clusters.assignments, labels)
}

/// Fraction of examples with a same-class example among their exact K
/// nearest neighbours (self excluded), for each requested K.
pub fn recall_at_k(embeddings: ArrayView2<'_, f64>, labels: &[usize], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let n = embeddings.nrows();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: labels.len(),
        });
    }
    let kmax = ks.iter().copied().max().unwrap_or(0);
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k >= n) {
        return Err(Error::KTooLarge {
            k: bad,
            available: n.saturating_sub(1),
        });
    }
    if ks.is_empty() {
        return Ok(BTreeMap::new());
    }
    let lists = all_knn(embeddings.as_standard_layout().view(), kmax)?;
    // Rank (1-based) of the first same-class neighbour, if any.
    let first_hit: Vec<Option<usize>> = lists
        .iter()
        .enumerate()
        .map(|(i, list)| list.iter().position(|nb| labels[nb.id] == labels[i]).map(|p| p + 1))
        .collect();
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = first_hit.iter().filter(|h| h.is_some_and(|r| r <= k)).count();
            (k, hits as f64 / n as f64)
        })
        .collect())
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            found: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    let correct = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / truth.len() as f64)
}

/// Disjoint class split: the first `ceil(fraction * C)` class ids (sorted)
/// train, the rest test. Both sides keep at least one class.
pub fn split_transfer(labels: &[usize], fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!(
            "transfer fraction must be in (0, 1), got {fraction}"
        )));
    }
    let classes: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let c = classes.len();
    if c < 2 {
        return Err(Error::input(format!(
            "transfer split needs at least 2 classes, found {c}"
        )));
    }
    let n_train = ((fraction * c as f64 - 1e-9).ceil() as usize).clamp(1, c - 1);
    let (train, test) = classes.split_at(n_train);
    Ok((train.to_vec(), test.to_vec()))
}
