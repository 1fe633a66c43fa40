//! Unsupervised pseudo-labels: k-means, Gaussian mixture and Ward clustering.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView1};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMethod {
    Kmeans,
    Gmm,
    Hierarchical,
}

impl ClusterMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ClusterMethod::Kmeans => "kmeans",
            ClusterMethod::Gmm => "gmm",
            ClusterMethod::Hierarchical => "hierarchical",
        }
    }
}

impl fmt::Display for ClusterMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClusterMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(ClusterMethod::Kmeans),
            "gmm" => Ok(ClusterMethod::Gmm),
            "hierarchical" => Ok(ClusterMethod::Hierarchical),
            _ => Err(Error::arg(format!("unknown clustering method {s:?}"))),
        }
    }
}

const KMEANS_RESTARTS: usize = 10;
const KMEANS_ITERS: usize = 300;
const GMM_ITERS: usize = 200;
const GMM_REG: f64 = 1e-6;

/// Cluster index in `0..arity` for every row of `x`.
pub fn cluster_labels(x: &Array2<f64>, method: ClusterMethod, arity: usize, seed: u64) -> Result<Vec<usize>> {
    if arity < 2 {
        return Err(Error::arg("arity must be at least 2"));
    }
    if distinct_rows(x, arity) < arity {
        return Err(Error::Clustering(format!(
            "fewer than {arity} distinct embeddings among {} rows",
            x.nrows()
        )));
    }
    match method {
        ClusterMethod::Kmeans => Ok(kmeans(x, arity, seed).0),
        ClusterMethod::Gmm => gmm(x, arity, seed),
        ClusterMethod::Hierarchical => Ok(ward(x, arity)),
    }
}

/// Counts distinct rows, stopping early once `enough` are found.
fn distinct_rows(x: &Array2<f64>, enough: usize) -> usize {
    let mut seen: Vec<ArrayView1<f64>> = Vec::new();
    for row in x.rows() {
        if !seen.contains(&row) {
            seen.push(row);
            if seen.len() >= enough {
                break;
            }
        }
    }
    seen.len()
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Best of [`KMEANS_RESTARTS`] Lloyd runs with k-means++ seeding.
/// Returns assignments and centroids.
pub fn kmeans(x: &Array2<f64>, k: usize, seed: u64) -> (Vec<usize>, Array2<f64>) {
    let mut best: Option<(f64, Vec<usize>, Array2<f64>)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut r = rng::rng(rng::mix(seed, &[restart as u64]));
        let (assign, cent, inertia) = lloyd(x, plus_plus(x, k, &mut r));
        if best.as_ref().is_none_or(|b| inertia < b.0) {
            best = Some((inertia, assign, cent));
        }
    }
    let (_, assign, cent) = best.expect("at least one restart");
    (assign, cent)
}

fn plus_plus(x: &Array2<f64>, k: usize, r: &mut rng::Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut cent = Array2::zeros((k, x.ncols()));
    cent.row_mut(0).assign(&x.row(r.random_range(0..n)));
    let mut d2: Vec<f64> = x.rows().into_iter().map(|row| sq_dist(row, cent.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = r.random_range(0.0..total);
            d2.iter()
                .position(|&d| {
                    t -= d;
                    t < 0.0
                })
                .unwrap_or(n - 1)
        } else {
            r.random_range(0..n)
        };
        cent.row_mut(c).assign(&x.row(pick));
        for (i, row) in x.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(row, cent.row(c)));
        }
    }
    cent
}

fn lloyd(x: &Array2<f64>, mut cent: Array2<f64>) -> (Vec<usize>, Array2<f64>, f64) {
    let (n, k) = (x.nrows(), cent.nrows());
    let mut assign = vec![usize::MAX; n];
    let mut inertia = 0.0;
    for _ in 0..KMEANS_ITERS {
        let mut changed = false;
        inertia = 0.0;
        for (i, row) in x.rows().into_iter().enumerate() {
            let (c, d) = (0..k)
                .map(|c| (c, sq_dist(row, cent.row(c))))
                .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
            inertia += d;
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros(cent.raw_dim());
        let mut counts = vec![0usize; k];
        for (i, row) in x.rows().into_iter().enumerate() {
            sums.row_mut(assign[i]).scaled_add(1.0, &row);
            counts[assign[i]] += 1;
        }
        for c in 0..k {
            // Empty clusters keep their previous centroid.
            if counts[c] > 0 {
                cent.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
    }
    (assign, cent, inertia)
}

/// Full-covariance Gaussian mixture fitted by EM from a k-means start.
/// Labels are the maximum-responsibility components.
fn gmm(x: &Array2<f64>, k: usize, seed: u64) -> Result<Vec<usize>> {
    let (n, d) = x.dim();
    let (init, _) = kmeans(x, k, seed);
    let mut resp = DMatrix::<f64>::zeros(n, k);
    for (i, &c) in init.iter().enumerate() {
        resp[(i, c)] = 1.0;
    }
    let data: Vec<DVector<f64>> = x.rows().into_iter().map(|r| DVector::from_iterator(d, r.iter().copied())).collect();
    let mut prev_ll = f64::NEG_INFINITY;
    for _ in 0..GMM_ITERS {
        // M step.
        let mut comps = Vec::with_capacity(k);
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[(i, c)]).sum::<f64>() + 1e-10;
            let mean = (0..n).fold(DVector::zeros(d), |acc, i| acc + &data[i] * resp[(i, c)]) / nk;
            let mut cov = DMatrix::<f64>::identity(d, d) * GMM_REG;
            for i in 0..n {
                let diff = &data[i] - &mean;
                cov.ger(resp[(i, c)] / nk, &diff, &diff, 1.0);
            }
            let chol = cov
                .cholesky()
                .ok_or_else(|| Error::Clustering("covariance is not positive definite".into()))?;
            let l = chol.l();
            let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
            comps.push(((nk / n as f64).ln(), mean, l, log_det));
        }
        // E step.
        let mut ll = 0.0;
        let half_d_log_2pi = 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
        for i in 0..n {
            let logp: Vec<f64> = comps
                .iter()
                .map(|(log_w, mean, l, log_det)| {
                    let diff = &data[i] - mean;
                    let z = l.solve_lower_triangular(&diff).expect("non-singular factor");
                    log_w - 0.5 * z.norm_squared() - 0.5 * log_det - half_d_log_2pi
                })
                .collect();
            let lse = crate::nn::logsumexp(logp.iter().copied());
            ll += lse;
            for c in 0..k {
                resp[(i, c)] = (logp[c] - lse).exp();
            }
        }
        if (ll - prev_ll).abs() < 1e-6 * ll.abs().max(1.0) {
            break;
        }
        prev_ll = ll;
    }
    Ok((0..n)
        .map(|i| (0..k).fold(0, |b, c| if resp[(i, c)] > resp[(i, b)] { c } else { b }))
        .collect())
}

/// Agglomerative clustering with Ward linkage via the nearest-neighbour chain.
/// Memory is linear: cluster distances come from centroids and sizes. The full
/// dendrogram is built, then the `n - k` lowest merges are replayed.
fn ward(x: &Array2<f64>, k: usize) -> Vec<usize> {
    let n = x.nrows();
    let mut cent: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let dist = |cent: &[Vec<f64>], size: &[usize], a: usize, b: usize| {
        let w = (size[a] * size[b]) as f64 / (size[a] + size[b]) as f64;
        w * cent[a].iter().zip(&cent[b]).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()
    };
    let mut merges: Vec<(f64, usize, usize)> = Vec::with_capacity(n.saturating_sub(1));
    let mut chain: Vec<usize> = Vec::new();
    while merges.len() + 1 < n {
        if chain.is_empty() {
            chain.push(active.iter().position(|&a| a).expect("active cluster"));
        }
        let a = *chain.last().unwrap();
        let prev = chain.len().checked_sub(2).map(|i| chain[i]);
        // Prefer the previous chain element on ties so the chain terminates.
        let mut best = prev;
        let mut best_d = prev.map_or(f64::INFINITY, |p| dist(&cent, &size, a, p));
        for b in 0..n {
            if active[b] && b != a {
                let d = dist(&cent, &size, a, b);
                if d < best_d {
                    best_d = d;
                    best = Some(b);
                }
            }
        }
        let b = best.expect("at least two active clusters");
        if Some(b) == prev {
            chain.pop();
            chain.pop();
            let (lo, hi) = (a.min(b), a.max(b));
            let total = (size[lo] + size[hi]) as f64;
            let merged: Vec<f64> = cent[lo]
                .iter()
                .zip(&cent[hi])
                .map(|(p, q)| (p * size[lo] as f64 + q * size[hi] as f64) / total)
                .collect();
            cent[lo] = merged;
            size[lo] += size[hi];
            active[hi] = false;
            merges.push((best_d, lo, hi));
        } else {
            chain.push(b);
        }
    }
    merges.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for &(_, a, b) in merges.iter().take(n - k) {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra.max(rb)] = ra.min(rb);
    }
    let mut ids = vec![usize::MAX; n];
    let mut next = 0;
    (0..n)
        .map(|i| {
            let root = find(&mut parent, i);
            if ids[root] == usize::MAX {
                ids[root] = next;
                next += 1;
            }
            ids[root]
        })
        .collect()
}
