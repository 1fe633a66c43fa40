//! Top-k ranking metrics over held-out interactions.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{InteractionDataset, Split};
use crate::{Error, Result};

/// Anything that can produce a full row of item scores for a user.
pub trait ScoreSource {
    fn user_count(&self) -> usize;
    fn item_count(&self) -> usize;
    fn user_scores(&self, u: usize, out: &mut Vec<f64>);
}

/// Scores `users[u] · items[v]`.
pub struct Factorized<'a> {
    users: ArrayView2<'a, f64>,
    items: ArrayView2<'a, f64>,
}

impl<'a> Factorized<'a> {
    pub fn new(users: &'a Array2<f64>, items: &'a Array2<f64>) -> Self {
        Self::from_views(users.view(), items.view())
    }

    pub fn from_views(users: ArrayView2<'a, f64>, items: ArrayView2<'a, f64>) -> Self {
        assert_eq!(users.ncols(), items.ncols(), "user/item dimension mismatch");
        Self { users, items }
    }
}

impl ScoreSource for Factorized<'_> {
    fn user_count(&self) -> usize {
        self.users.nrows()
    }

    fn item_count(&self) -> usize {
        self.items.nrows()
    }

    fn user_scores(&self, u: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.items.dot(&self.users.row(u)).iter());
    }
}

/// Dense `M x N` score matrix.
impl ScoreSource for Array2<f64> {
    fn user_count(&self) -> usize {
        self.nrows()
    }

    fn item_count(&self) -> usize {
        self.ncols()
    }

    fn user_scores(&self, u: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.row(u).iter());
    }
}

fn masked_splits(target: Split) -> &'static [Split] {
    match target {
        Split::Test => &[Split::Train, Split::Val],
        Split::Val => &[Split::Train],
        Split::Train => &[],
    }
}

/// Per-user top-`k` items for evaluating `target`. Items in the other known
/// splits are excluded; ties break toward the lower item index.
pub fn rank_top_k<S: ScoreSource + ?Sized>(
    source: &S,
    ds: &InteractionDataset,
    target: Split,
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > ds.item_count() {
        return Err(Error::arg(format!("k = {k} must be in 1..={}", ds.item_count())));
    }
    if source.user_count() != ds.user_count() || source.item_count() != ds.item_count() {
        return Err(Error::arg("score source shape does not match the dataset"));
    }
    let mut scores = Vec::with_capacity(ds.item_count());
    let mut masked = vec![false; ds.item_count()];
    let mut out = Vec::with_capacity(ds.user_count());
    for u in 0..ds.user_count() {
        source.user_scores(u, &mut scores);
        let hidden: Vec<usize> = masked_splits(target)
            .iter()
            .flat_map(|&s| ds.user_history(u, s).expect("valid user"))
            .collect();
        for &v in &hidden {
            masked[v] = true;
        }
        let mut cand: Vec<usize> = (0..ds.item_count()).filter(|&v| !masked[v]).collect();
        for &v in &hidden {
            masked[v] = false;
        }
        let by_score = |a: &usize, b: &usize| {
            let (sa, sb) = (finite_or_min(scores[*a]), finite_or_min(scores[*b]));
            sb.partial_cmp(&sa).unwrap_or(Ordering::Equal).then(a.cmp(b))
        };
        let kk = k.min(cand.len());
        if kk > 0 && kk < cand.len() {
            cand.select_nth_unstable_by(kk - 1, by_score);
            cand.truncate(kk);
        }
        cand.sort_unstable_by(by_score);
        out.push(cand);
    }
    Ok(out)
}

fn finite_or_min(x: f64) -> f64 {
    if x.is_nan() {
        f64::NEG_INFINITY
    } else {
        x
    }
}

/// Aggregate and per-user values of one metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub k: usize,
    /// `(user, value)` for users with a non-empty target split.
    pub per_user: Vec<(usize, f64)>,
}

impl MetricValue {
    fn from_per_user(k: usize, per_user: Vec<(usize, f64)>) -> Self {
        let value = if per_user.is_empty() {
            0.0
        } else {
            per_user.iter().map(|p| p.1).sum::<f64>() / per_user.len() as f64
        };
        Self { value, k, per_user }
    }
}

/// Recall@k and NDCG@k together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub k: usize,
    pub recall_at_k: f64,
    pub ndcg_at_k: f64,
    pub per_user_recall: Vec<(usize, f64)>,
    pub per_user_ndcg: Vec<(usize, f64)>,
}

/// `|top-k ∩ target| / |target|` for one user.
pub fn user_recall(top: &[usize], relevant: &[usize]) -> f64 {
    let hits = top.iter().filter(|v| relevant.contains(v)).count();
    hits as f64 / relevant.len() as f64
}

/// Binary-gain NDCG with discount `1 / log2(rank + 1)`.
pub fn user_ndcg(top: &[usize], relevant: &[usize], k: usize) -> f64 {
    let dcg: f64 = top
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, v)| relevant.contains(v))
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..relevant.len().min(k)).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
    dcg / ideal
}

fn per_user<F: Fn(&[usize], &[usize]) -> f64>(
    tops: &[Vec<usize>],
    ds: &InteractionDataset,
    target: Split,
    f: F,
) -> Vec<(usize, f64)> {
    tops.iter()
        .enumerate()
        .filter_map(|(u, top)| {
            let rel = ds.user_history(u, target).expect("valid user");
            (!rel.is_empty()).then(|| (u, f(top, &rel)))
        })
        .collect()
}

pub fn recall_at_k<S: ScoreSource + ?Sized>(
    source: &S,
    ds: &InteractionDataset,
    target: Split,
    k: usize,
) -> Result<MetricValue> {
    let tops = rank_top_k(source, ds, target, k)?;
    Ok(MetricValue::from_per_user(k, per_user(&tops, ds, target, user_recall)))
}

pub fn ndcg_at_k<S: ScoreSource + ?Sized>(
    source: &S,
    ds: &InteractionDataset,
    target: Split,
    k: usize,
) -> Result<MetricValue> {
    let tops = rank_top_k(source, ds, target, k)?;
    Ok(MetricValue::from_per_user(k, per_user(&tops, ds, target, |t, r| user_ndcg(t, r, k))))
}

/// Both metrics from a single ranking pass.
pub fn ranking_report<S: ScoreSource + ?Sized>(
    source: &S,
    ds: &InteractionDataset,
    target: Split,
    k: usize,
) -> Result<RankingReport> {
    let tops = rank_top_k(source, ds, target, k)?;
    let recall = MetricValue::from_per_user(k, per_user(&tops, ds, target, user_recall));
    let ndcg = MetricValue::from_per_user(k, per_user(&tops, ds, target, |t, r| user_ndcg(t, r, k)));
    Ok(RankingReport {
        k,
        recall_at_k: recall.value,
        ndcg_at_k: ndcg.value,
        per_user_recall: recall.per_user,
        per_user_ndcg: ndcg.per_user,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Interaction;
    use ndarray::array;

    fn dataset(test_items: &[usize], train_items: &[usize], n: usize) -> InteractionDataset {
        let mut its: Vec<Interaction> = train_items
            .iter()
            .map(|&v| Interaction { user: 0, item: v, split: Split::Train })
            .collect();
        its.extend(test_items.iter().map(|&v| Interaction { user: 0, item: v, split: Split::Test }));
        InteractionDataset::new(vec!["0".into()], (0..n).map(|v| v.to_string()).collect(), its).unwrap()
    }

    #[test]
    fn perfect_and_empty_hits() {
        let ds = dataset(&[1, 2], &[0], 6);
        let good = array![[9.0, 5.0, 4.0, 0.0, 0.0, 0.0]];
        assert_eq!(recall_at_k(&good, &ds, Split::Test, 2).unwrap().value, 1.0);
        assert_eq!(ndcg_at_k(&good, &ds, Split::Test, 2).unwrap().value, 1.0);
        let bad = array![[9.0, 0.0, 0.0, 5.0, 4.0, 3.0]];
        assert_eq!(recall_at_k(&bad, &ds, Split::Test, 2).unwrap().value, 0.0);
    }

    #[test]
    fn single_hit_at_rank_two() {
        let ds = dataset(&[3], &[], 25);
        let mut s = Array2::zeros((1, 25));
        for v in 0..25 {
            s[[0, v]] = -(v as f64);
        }
        s[[0, 3]] = -0.5; // second place behind item 0
        let ndcg = ndcg_at_k(&s, &ds, Split::Test, 20).unwrap().value;
        assert!((ndcg - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((ndcg - 0.6309).abs() < 1e-4);
    }

    #[test]
    fn train_items_are_masked_and_k_is_checked() {
        let ds = dataset(&[2], &[0, 1], 3);
        let s = array![[10.0, 9.0, 0.0]];
        assert_eq!(recall_at_k(&s, &ds, Split::Test, 1).unwrap().value, 1.0);
        assert!(matches!(recall_at_k(&s, &ds, Split::Test, 4), Err(Error::Argument(_))));
    }

    #[test]
    fn users_without_targets_are_skipped() {
        let ds = InteractionDataset::new(
            vec!["a".into(), "b".into()],
            (0..3).map(|v| v.to_string()).collect(),
            vec![
                Interaction { user: 0, item: 0, split: Split::Test },
                Interaction { user: 1, item: 1, split: Split::Train },
            ],
        )
        .unwrap();
        let s = array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let r = recall_at_k(&s, &ds, Split::Test, 1).unwrap();
        assert_eq!(r.per_user, vec![(0, 1.0)]);
    }

    fn permutations(items: Vec<usize>) -> Vec<Vec<usize>> {
        if items.len() <= 1 {
            return vec![items];
        }
        let mut out = Vec::new();
        for i in 0..items.len() {
            let mut rest = items.clone();
            let head = rest.remove(i);
            for mut p in permutations(rest) {
                p.insert(0, head);
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn exhaustive_five_item_orderings() {
        let ds = dataset(&[1, 3], &[0], 5);
        for perm in permutations((0..5).collect()) {
            // perm[r] is the item placed at rank r.
            let mut s = Array2::zeros((1, 5));
            for (r, &v) in perm.iter().enumerate() {
                s[[0, v]] = 10.0 - r as f64;
            }
            for k in 1..=4 {
                let visible: Vec<usize> = perm.iter().copied().filter(|&v| v != 0).take(k).collect();
                let hits: Vec<bool> = visible.iter().map(|&v| v == 1 || v == 3).collect();
                let recall = hits.iter().filter(|&&h| h).count() as f64 / 2.0;
                let dcg: f64 = hits
                    .iter()
                    .enumerate()
                    .map(|(r, &h)| if h { 1.0 / ((r + 2) as f64).log2() } else { 0.0 })
                    .sum();
                let idcg = if k == 1 { 1.0 } else { 1.0 + 1.0 / 3f64.log2() };
                let got_r = recall_at_k(&s, &ds, Split::Test, k).unwrap().value;
                let got_n = ndcg_at_k(&s, &ds, Split::Test, k).unwrap().value;
                assert!((got_r - recall).abs() < 1e-12, "{perm:?} k={k}");
                assert!((got_n - dcg / idcg).abs() < 1e-12, "{perm:?} k={k}");
                // Strictly monotone transforms leave the ranking unchanged.
                let warped = s.mapv(|x: f64| x.powi(3) - 7.0);
                assert_eq!(recall_at_k(&warped, &ds, Split::Test, k).unwrap().value, got_r);
            }
        }
    }

    #[test]
    fn factorized_equals_dense() {
        let users = array![[1.0, 0.0], [0.2, 0.7]];
        let items = array![[0.1, 0.2], [0.3, -0.1], [1.0, 1.0]];
        let dense = users.dot(&items.t());
        let f = Factorized::new(&users, &items);
        let mut row = Vec::new();
        f.user_scores(1, &mut row);
        for (a, b) in row.iter().zip(dense.row(1)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
