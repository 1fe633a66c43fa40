//! Quality of inferred sensitive labels against held-out ground truth.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::GroundTruthLabels;
use crate::{Error, Label, Result};

/// Where a set of predicted labels came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelStrategy {
    Random,
    Kmeans,
    Gmm,
    Hierarchical,
    LlmSingle,
    LlmMv,
}

impl LabelStrategy {
    pub const ALL: [LabelStrategy; 6] = [
        LabelStrategy::Random,
        LabelStrategy::Kmeans,
        LabelStrategy::Gmm,
        LabelStrategy::Hierarchical,
        LabelStrategy::LlmSingle,
        LabelStrategy::LlmMv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LabelStrategy::Random => "random",
            LabelStrategy::Kmeans => "kmeans",
            LabelStrategy::Gmm => "gmm",
            LabelStrategy::Hierarchical => "hierarchical",
            LabelStrategy::LlmSingle => "llm-single",
            LabelStrategy::LlmMv => "llm-mv",
        }
    }

    /// Cluster ids carry no label semantics and need alignment before scoring.
    pub fn is_clustering(self) -> bool {
        matches!(self, LabelStrategy::Kmeans | LabelStrategy::Gmm | LabelStrategy::Hierarchical)
    }
}

impl fmt::Display for LabelStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::arg(format!("unknown label strategy {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelQualityReport {
    pub strategy: LabelStrategy,
    pub accuracy: f64,
    /// Binary F1 with label 1 as positive; macro F1 for larger arities.
    pub f1: f64,
    pub evaluated: usize,
    pub abstained: usize,
}

/// Most frequent non-abstaining label; ties and all-abstain give `None`.
pub fn majority_vote(votes: &[Label]) -> Label {
    let arity = votes.iter().flatten().max().map_or(0, |&m| m + 1);
    let mut counts = vec![0usize; arity];
    for &v in votes.iter().flatten() {
        counts[v] += 1;
    }
    let best = *counts.iter().max()?;
    if best == 0 {
        return None;
    }
    let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == best);
    let (label, _) = winners.next()?;
    winners.next().is_none().then_some(label)
}

/// Best label for each cluster id: the permutation maximising agreement with
/// `truth`. Exhaustive for small arities, Hungarian assignment otherwise.
pub fn align_clusters(clusters: &[usize], truth: &[usize], arity: usize) -> Result<Vec<usize>> {
    if clusters.len() != truth.len() {
        return Err(Error::arg("cluster and truth lengths differ"));
    }
    let mut counts = vec![vec![0i64; arity]; arity];
    for (&c, &t) in clusters.iter().zip(truth) {
        if c >= arity || t >= arity {
            return Err(Error::arg(format!("label outside arity {arity}")));
        }
        counts[c][t] += 1;
    }
    if arity <= 8 {
        Ok(best_permutation(&counts))
    } else {
        let cost: Vec<Vec<i64>> = counts.iter().map(|r| r.iter().map(|&c| -c).collect()).collect();
        Ok(hungarian(&cost))
    }
}

fn best_permutation(counts: &[Vec<i64>]) -> Vec<usize> {
    fn go(
        row: usize,
        counts: &[Vec<i64>],
        used: &mut [bool],
        cur: &mut Vec<usize>,
        score: i64,
        best: &mut (i64, Vec<usize>),
    ) {
        if row == counts.len() {
            if score > best.0 {
                *best = (score, cur.clone());
            }
            return;
        }
        for col in 0..counts.len() {
            if !used[col] {
                used[col] = true;
                cur.push(col);
                go(row + 1, counts, used, cur, score + counts[row][col], best);
                cur.pop();
                used[col] = false;
            }
        }
    }
    let n = counts.len();
    let mut best = (i64::MIN, Vec::new());
    go(0, counts, &mut vec![false; n], &mut Vec::with_capacity(n), 0, &mut best);
    best.1
}

/// Minimum-cost perfect assignment on a square matrix (Kuhn-Munkres with
/// potentials). Returns the column assigned to each row.
pub fn hungarian(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = i64::MAX / 4;
    let (mut u, mut v) = (vec![0i64; n + 1], vec![0i64; n + 1]);
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

fn f1_for(pred: &[usize], truth: &[usize], class: usize) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == class, t == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Accuracy and F1 of `predicted` against `truth`. Abstentions are excluded
/// from both scores and counted. Clustering strategies are aligned first.
pub fn label_quality(
    predicted: &[Label],
    truth: &GroundTruthLabels,
    strategy: LabelStrategy,
) -> Result<LabelQualityReport> {
    if predicted.len() != truth.labels.len() {
        return Err(Error::arg(format!(
            "{} predictions for {} users",
            predicted.len(),
            truth.labels.len()
        )));
    }
    if let Some(bad) = predicted.iter().flatten().find(|&&p| p >= truth.arity) {
        return Err(Error::arg(format!("predicted label {bad} outside arity {}", truth.arity)));
    }
    let (mut pred, mut gold) = (Vec::new(), Vec::new());
    for (p, &t) in predicted.iter().zip(&truth.labels) {
        if let Some(p) = p {
            pred.push(*p);
            gold.push(t);
        }
    }
    let abstained = predicted.len() - pred.len();
    if pred.is_empty() {
        return Ok(LabelQualityReport { strategy, accuracy: 0.0, f1: 0.0, evaluated: 0, abstained });
    }
    if strategy.is_clustering() {
        let map = align_clusters(&pred, &gold, truth.arity)?;
        pred.iter_mut().for_each(|p| *p = map[*p]);
    }
    let correct = pred.iter().zip(&gold).filter(|(p, t)| p == t).count();
    let f1 = if truth.arity == 2 {
        f1_for(&pred, &gold, 1)
    } else {
        (0..truth.arity).map(|c| f1_for(&pred, &gold, c)).sum::<f64>() / truth.arity as f64
    };
    Ok(LabelQualityReport {
        strategy,
        accuracy: correct as f64 / pred.len() as f64,
        f1,
        evaluated: pred.len(),
        abstained,
    })
}
