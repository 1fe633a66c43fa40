//! Group fairness of top-k recommendation lists.
//!
//! DP@k is the total-variation distance between the per-group item exposure
//! distributions, divided by `k` so that identical exposure gives 0 and
//! disjoint exposure gives 1. EO@k is the absolute gap between group recalls.
//! With more than two groups both report the largest pairwise value.

use serde::{Deserialize, Serialize};

use super::ranking::{rank_top_k, user_recall, ScoreSource};
use crate::data::{InteractionDataset, Split};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupFairnessReport {
    pub k: usize,
    pub dp_at_k: f64,
    pub eo_at_k: f64,
    /// Users per group, indexed by group id.
    pub group_sizes: Vec<usize>,
}

fn group_sizes(groups: &[usize], arity: usize) -> Result<Vec<usize>> {
    let mut sizes = vec![0usize; arity];
    for &g in groups {
        if g >= arity {
            return Err(Error::arg(format!("group {g} outside arity {arity}")));
        }
        sizes[g] += 1;
    }
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::arg(format!("group {empty} is empty")));
    }
    Ok(sizes)
}

fn max_pairwise<F: Fn(usize, usize) -> f64>(arity: usize, f: F) -> f64 {
    let mut worst = 0.0f64;
    for a in 0..arity {
        for b in a + 1..arity {
            worst = worst.max(f(a, b));
        }
    }
    worst
}

/// Demographic parity of exposure over top-`k` lists.
pub fn dp_at_k(
    recommendations: &[Vec<usize>],
    groups: &[usize],
    arity: usize,
    item_count: usize,
    k: usize,
) -> Result<f64> {
    if recommendations.len() != groups.len() {
        return Err(Error::arg("one group label per recommendation list is required"));
    }
    if k == 0 {
        return Err(Error::arg("k must be positive"));
    }
    let sizes = group_sizes(groups, arity)?;
    let mut exposure = vec![vec![0.0f64; item_count]; arity];
    for (list, &g) in recommendations.iter().zip(groups) {
        for &v in list.iter().take(k) {
            if v >= item_count {
                return Err(Error::arg(format!("item {v} outside {item_count} items")));
            }
            exposure[g][v] += 1.0 / sizes[g] as f64;
        }
    }
    Ok(max_pairwise(arity, |a, b| {
        let tv: f64 = exposure[a].iter().zip(&exposure[b]).map(|(x, y)| (x - y).abs()).sum();
        0.5 * tv / k as f64
    }))
}

/// Largest gap in mean recall@k between groups. Users without target items
/// do not count toward their group's mean.
pub fn eo_at_k<S: ScoreSource + ?Sized>(
    source: &S,
    ds: &InteractionDataset,
    groups: &[usize],
    arity: usize,
    k: usize,
) -> Result<f64> {
    let tops = rank_top_k(source, ds, Split::Test, k)?;
    eo_from_lists(&tops, ds, groups, arity)
}

/// [`eo_at_k`] on precomputed top-k lists against the test split.
pub fn eo_from_lists(
    tops: &[Vec<usize>],
    ds: &InteractionDataset,
    groups: &[usize],
    arity: usize,
) -> Result<f64> {
    if tops.len() != groups.len() || groups.len() != ds.user_count() {
        return Err(Error::arg("one group label per user is required"));
    }
    group_sizes(groups, arity)?;
    let mut sum = vec![0.0f64; arity];
    let mut count = vec![0usize; arity];
    for (u, top) in tops.iter().enumerate() {
        let rel = ds.user_history(u, Split::Test)?;
        if rel.is_empty() {
            continue;
        }
        sum[groups[u]] += user_recall(top, &rel);
        count[groups[u]] += 1;
    }
    if let Some(g) = count.iter().position(|&c| c == 0) {
        return Err(Error::arg(format!("group {g} has no users with test items")));
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
    Ok(max_pairwise(arity, |a, b| (mean[a] - mean[b]).abs()))
}

/// Both metrics from one ranking pass over the test split.
pub fn group_fairness<S: ScoreSource + ?Sized>(
    source: &S,
    ds: &InteractionDataset,
    groups: &[usize],
    arity: usize,
    k: usize,
) -> Result<GroupFairnessReport> {
    let tops = rank_top_k(source, ds, Split::Test, k)?;
    Ok(GroupFairnessReport {
        k,
        dp_at_k: dp_at_k(&tops, groups, arity, ds.item_count(), k)?,
        eo_at_k: eo_from_lists(&tops, ds, groups, arity)?,
        group_sizes: group_sizes(groups, arity)?,
    })
}
