//! Implicit-feedback interaction data: ingestion, k-core filtering, per-user
//! splits and a planted synthetic generator with hidden group labels.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::arg(format!("unknown split tag {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub split: Split,
}

/// Input file layouts for [`load_interactions`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InteractionFormat {
    /// `uid::iid::rating::timestamp`
    MovielensDat,
    /// `uid<TAB>iid[<TAB>rating[<TAB>timestamp]]`
    Tsv,
}

/// Users, items and the positive entries of the interaction matrix, each tagged
/// with the split it belongs to. Indices are dense; raw ids are kept for output.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    user_raw_ids: Vec<String>,
    item_raw_ids: Vec<String>,
    interactions: Vec<Interaction>,
    by_user: Vec<Vec<usize>>,
    // Sorted item lists per user across all splits, for membership tests.
    known: Vec<Vec<usize>>,
}

impl InteractionDataset {
    /// Builds a dataset, validating index ranges and rejecting duplicate pairs.
    pub fn new(
        user_raw_ids: Vec<String>,
        item_raw_ids: Vec<String>,
        interactions: Vec<Interaction>,
    ) -> Result<Self> {
        let m = user_raw_ids.len();
        let n = item_raw_ids.len();
        let mut by_user = vec![Vec::new(); m];
        let mut known = vec![Vec::new(); m];
        for (idx, it) in interactions.iter().enumerate() {
            if it.user >= m || it.item >= n {
                return Err(Error::invalid(format!(
                    "interaction ({}, {}) outside {m} x {n}",
                    it.user, it.item
                )));
            }
            by_user[it.user].push(idx);
            known[it.user].push(it.item);
        }
        for (u, items) in known.iter_mut().enumerate() {
            items.sort_unstable();
            if items.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::invalid(format!("duplicate interaction for user {u}")));
            }
        }
        Ok(Self {
            user_raw_ids,
            item_raw_ids,
            interactions,
            by_user,
            known,
        })
    }

    /// Convenience constructor with raw ids equal to the dense indices.
    pub fn from_pairs(user_count: usize, item_count: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let interactions = pairs
            .iter()
            .map(|&(user, item)| Interaction { user, item, split: Split::Train })
            .collect();
        Self::new(
            (0..user_count).map(|u| u.to_string()).collect(),
            (0..item_count).map(|v| v.to_string()).collect(),
            interactions,
        )
    }

    pub fn user_count(&self) -> usize {
        self.user_raw_ids.len()
    }

    pub fn item_count(&self) -> usize {
        self.item_raw_ids.len()
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn user_raw_ids(&self) -> &[String] {
        &self.user_raw_ids
    }

    pub fn item_raw_ids(&self) -> &[String] {
        &self.item_raw_ids
    }

    pub fn user_degree(&self, u: usize) -> usize {
        self.by_user[u].len()
    }

    /// True if `u` interacted with `v` in any split.
    pub fn has_interaction(&self, u: usize, v: usize) -> bool {
        self.known[u].binary_search(&v).is_ok()
    }

    /// All items of `u` (any split), sorted.
    pub fn known_items(&self, u: usize) -> &[usize] {
        &self.known[u]
    }

    /// Items of `u` tagged `split`, in insertion order.
    pub fn user_history(&self, u: usize, split: Split) -> Result<Vec<usize>> {
        if u >= self.user_count() {
            return Err(Error::arg(format!("user {u} out of range")));
        }
        Ok(self.by_user[u]
            .iter()
            .map(|&i| self.interactions[i])
            .filter(|it| it.split == split)
            .map(|it| it.item)
            .collect())
    }

    /// [`user_history`](Self::user_history) keyed by a textual split tag.
    pub fn user_history_tag(&self, u: usize, tag: &str) -> Result<Vec<usize>> {
        self.user_history(u, tag.parse()?)
    }

    /// `(user, item)` pairs of one split, in insertion order.
    pub fn pairs(&self, split: Split) -> Vec<(usize, usize)> {
        self.interactions
            .iter()
            .filter(|it| it.split == split)
            .map(|it| (it.user, it.item))
            .collect()
    }

    pub fn split_sizes(&self, u: usize) -> (usize, usize, usize) {
        let mut sizes = (0, 0, 0);
        for &i in &self.by_user[u] {
            match self.interactions[i].split {
                Split::Train => sizes.0 += 1,
                Split::Val => sizes.1 += 1,
                Split::Test => sizes.2 += 1,
            }
        }
        sizes
    }

    /// Keeps only the listed users (in the given order) and the items they still
    /// touch, then re-indexes densely. Split tags are preserved.
    pub fn restrict_users(&self, keep: &[usize]) -> Result<Self> {
        let mut keep_user = vec![false; self.user_count()];
        for &u in keep {
            keep_user[u] = true;
        }
        let kept: Vec<Interaction> = self
            .interactions
            .iter()
            .copied()
            .filter(|it| keep_user[it.user])
            .collect();
        let mut keep_item = vec![false; self.item_count()];
        for it in &kept {
            keep_item[it.item] = true;
        }
        self.reindex(&keep_user, &keep_item, kept)
    }

    fn reindex(
        &self,
        keep_user: &[bool],
        keep_item: &[bool],
        kept: Vec<Interaction>,
    ) -> Result<Self> {
        let remap = |keep: &[bool]| {
            let mut next = 0usize;
            keep.iter()
                .map(|&k| {
                    k.then(|| {
                        next += 1;
                        next - 1
                    })
                })
                .collect::<Vec<_>>()
        };
        let user_map = remap(keep_user);
        let item_map = remap(keep_item);
        let user_raw_ids = self
            .user_raw_ids
            .iter()
            .zip(keep_user)
            .filter(|(_, &k)| k)
            .map(|(id, _)| id.clone())
            .collect();
        let item_raw_ids = self
            .item_raw_ids
            .iter()
            .zip(keep_item)
            .filter(|(_, &k)| k)
            .map(|(id, _)| id.clone())
            .collect();
        let interactions = kept
            .into_iter()
            .map(|it| Interaction {
                user: user_map[it.user].expect("kept user"),
                item: item_map[it.item].expect("kept item"),
                split: it.split,
            })
            .collect();
        Self::new(user_raw_ids, item_raw_ids, interactions)
    }
}

/// Hidden per-user sensitive labels. Only evaluation and the simulated annotator
/// backend consume these; no training entry point accepts them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthLabels {
    pub labels: Vec<usize>,
    pub arity: usize,
    pub visibility: Visibility,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Visibility {
    TestOnly,
    Simulation,
}

impl GroundTruthLabels {
    pub fn new(labels: Vec<usize>, arity: usize, visibility: Visibility) -> Result<Self> {
        if arity < 2 {
            return Err(Error::invalid("attribute arity must be at least 2"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= arity) {
            return Err(Error::invalid(format!("label {bad} outside arity {arity}")));
        }
        Ok(Self { labels, arity, visibility })
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads an interaction file; ratings `> 0` (or a missing rating column) are
/// positive feedback. Raw ids are re-indexed in order of first appearance.
pub fn load_interactions(path: &Path, format: InteractionFormat) -> Result<InteractionDataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut users: HashMap<String, usize> = HashMap::new();
    let mut items: HashMap<String, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut interactions = Vec::new();
    let mut rows = 0usize;

    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() {
            continue;
        }
        rows += 1;
        let fields: Vec<&str> = match format {
            InteractionFormat::MovielensDat => trimmed.split("::").collect(),
            InteractionFormat::Tsv => trimmed.split('\t').collect(),
        };
        if fields.len() < 2 || fields.len() > 4 {
            return Err(parse_err(path, lineno, format!("expected 2-4 fields, found {}", fields.len())));
        }
        let (uid, iid) = (fields[0].trim(), fields[1].trim());
        if uid.is_empty() || iid.is_empty() {
            return Err(parse_err(path, lineno, "empty user or item id"));
        }
        if let Some(rating) = fields.get(2) {
            let rating: f64 = rating
                .trim()
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("bad rating {rating:?}")))?;
            if let Some(ts) = fields.get(3) {
                ts.trim()
                    .parse::<i64>()
                    .map_err(|_| parse_err(path, lineno, format!("bad timestamp {ts:?}")))?;
            }
            if rating <= 0.0 {
                continue;
            }
        }
        let u = *users.entry(uid.to_string()).or_insert_with(|| {
            user_ids.push(uid.to_string());
            user_ids.len() - 1
        });
        let v = *items.entry(iid.to_string()).or_insert_with(|| {
            item_ids.push(iid.to_string());
            item_ids.len() - 1
        });
        if seen.insert((u, v)) {
            interactions.push(Interaction { user: u, item: v, split: Split::Train });
        }
    }
    if rows == 0 {
        return Err(Error::EmptyDataset(format!("{} has no rows", path.display())));
    }
    if interactions.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no positive interactions", path.display())));
    }
    InteractionDataset::new(user_ids, item_ids, interactions)
}

/// Keeps a seeded random `frac` of users (before any filtering).
pub fn sample_users(ds: &InteractionDataset, frac: f64, seed: u64) -> Result<InteractionDataset> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::arg(format!("user sample fraction {frac} not in (0, 1]")));
    }
    if frac == 1.0 {
        return Ok(ds.clone());
    }
    let mut users: Vec<usize> = (0..ds.user_count()).collect();
    users.shuffle(&mut rng::rng(seed));
    let keep = ((ds.user_count() as f64 * frac).round() as usize).max(1);
    let mut chosen = users[..keep].to_vec();
    chosen.sort_unstable();
    ds.restrict_users(&chosen)
}

/// Iteratively removes users and items with fewer than `k` interactions until
/// nothing changes, then re-indexes densely.
pub fn core_filter(ds: &InteractionDataset, k: usize) -> Result<InteractionDataset> {
    if k == 0 {
        return Err(Error::arg("core filter k must be at least 1"));
    }
    let mut alive = vec![true; ds.interactions.len()];
    let mut keep_user = vec![true; ds.user_count()];
    let mut keep_item = vec![true; ds.item_count()];
    loop {
        let mut udeg = vec![0usize; ds.user_count()];
        let mut ideg = vec![0usize; ds.item_count()];
        for (it, _) in ds.interactions.iter().zip(&alive).filter(|(_, &a)| a) {
            udeg[it.user] += 1;
            ideg[it.item] += 1;
        }
        let mut changed = false;
        for (u, keep) in keep_user.iter_mut().enumerate() {
            if *keep && udeg[u] < k {
                *keep = false;
                changed = true;
            }
        }
        for (v, keep) in keep_item.iter_mut().enumerate() {
            if *keep && ideg[v] < k {
                *keep = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (a, it) in alive.iter_mut().zip(&ds.interactions) {
            *a = *a && keep_user[it.user] && keep_item[it.item];
        }
    }
    let kept: Vec<Interaction> = ds
        .interactions
        .iter()
        .zip(&alive)
        .filter(|(_, &a)| a)
        .map(|(it, _)| *it)
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyAfterFilter { k });
    }
    ds.reindex(&keep_user, &keep_item, kept)
}

/// Split ratios for [`split_per_user`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitRatios {
    /// `(train, val, test)` sizes for a user with `n` interactions.
    ///
    /// Validation and test each get `floor(ratio * n)` interactions but never
    /// fewer than one; training takes the remainder and is never empty for n >= 3.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let count = |r: f64| (((r * n as f64) + 1e-9).floor() as usize).max(1);
        let test = count(self.test);
        let val = count(self.val);
        (n - val - test, val, test)
    }
}

/// Shuffles each user's interactions with a per-user seeded stream and tags them
/// test, then validation, then training.
pub fn split_per_user(
    ds: &InteractionDataset,
    ratios: SplitRatios,
    seed: u64,
) -> Result<InteractionDataset> {
    let sum = ratios.train + ratios.val + ratios.test;
    if (sum - 1.0).abs() > 1e-9 || ratios.val < 0.0 || ratios.test < 0.0 {
        return Err(Error::arg(format!("split ratios must sum to 1, got {sum}")));
    }
    let mut out = ds.clone();
    for u in 0..ds.user_count() {
        let n = ds.by_user[u].len();
        if n < 3 {
            return Err(Error::Split { user: u, count: n });
        }
        let mut order = ds.by_user[u].clone();
        order.shuffle(&mut rng::rng(rng::mix(seed, &[u as u64])));
        let (_, val, test) = ratios.sizes(n);
        for (pos, &idx) in order.iter().enumerate() {
            out.interactions[idx].split = if pos < test {
                Split::Test
            } else if pos < test + val {
                Split::Val
            } else {
                Split::Train
            };
        }
    }
    Ok(out)
}

/// Parameters of the planted synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub user_count: usize,
    pub item_count: usize,
    /// Fraction of users in group 0.
    pub group_ratio: f64,
    pub cluster_count: usize,
    /// Probability that an interaction is drawn from the user's own group cluster.
    pub preference_mix: f64,
    pub interactions_per_user: usize,
    /// Zipf exponent of item popularity inside each cluster; 0 is uniform.
    #[serde(default)]
    pub popularity_skew: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            user_count: 1000,
            item_count: 200,
            group_ratio: 0.5,
            cluster_count: 2,
            preference_mix: 0.8,
            interactions_per_user: 20,
            popularity_skew: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleSpec(m));
        if self.user_count == 0 || self.item_count == 0 {
            return bad("user and item counts must be positive".into());
        }
        if !(self.group_ratio > 0.0 && self.group_ratio < 1.0) {
            return bad(format!("group_ratio {} not in (0, 1)", self.group_ratio));
        }
        if self.cluster_count < 2 || self.cluster_count > self.item_count {
            return bad(format!("cluster_count {} invalid", self.cluster_count));
        }
        if !(0.5..=1.0).contains(&self.preference_mix) {
            return bad(format!("preference_mix {} not in [0.5, 1]", self.preference_mix));
        }
        if self.interactions_per_user < 10 {
            return bad("interactions_per_user must be at least 10".into());
        }
        if self.interactions_per_user > self.item_count {
            return bad(format!(
                "{} interactions per user exceed {} items",
                self.interactions_per_user, self.item_count
            ));
        }
        if self.popularity_skew < 0.0 || !self.popularity_skew.is_finite() {
            return bad("popularity_skew must be a finite non-negative number".into());
        }
        Ok(())
    }

    /// Cluster of item `v`: items are cut into contiguous, nearly equal blocks.
    pub fn cluster_of(&self, v: usize) -> usize {
        v * self.cluster_count / self.item_count
    }
}

/// Draws `count` distinct indices from `pool` with the given weights.
fn weighted_distinct(
    pool: &[usize],
    weights: &[f64],
    taken: &mut [bool],
    rng: &mut rng::Rng,
) -> Option<usize> {
    let total: f64 = pool.iter().zip(weights).filter(|(&v, _)| !taken[v]).map(|(_, w)| w).sum();
    if total <= 0.0 {
        return None;
    }
    let mut x = rng.random::<f64>() * total;
    let mut last = None;
    for (&v, &w) in pool.iter().zip(weights) {
        if taken[v] {
            continue;
        }
        last = Some(v);
        if x < w {
            return Some(v);
        }
        x -= w;
    }
    last
}

/// Generates a dataset where group membership drives item-cluster preference.
/// Item titles follow `cluster{c}_item{j}`; labels carry simulation visibility.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(InteractionDataset, GroundTruthLabels, Vec<String>)> {
    spec.validate()?;
    let m = spec.user_count;
    let n = spec.item_count;
    let mut group_rng = rng::named(spec.seed, "synthetic-groups");
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut group_rng);
    let group0 = ((m as f64 * spec.group_ratio).round() as usize).clamp(1, m - 1);
    let mut labels = vec![1usize; m];
    for &u in &order[..group0] {
        labels[u] = 0;
    }

    let clusters: Vec<Vec<usize>> = (0..spec.cluster_count)
        .map(|c| (0..n).filter(|&v| spec.cluster_of(v) == c).collect())
        .collect();
    let weight_of = |v: usize| {
        let rank = v - clusters[spec.cluster_of(v)][0];
        1.0 / ((rank + 1) as f64).powf(spec.popularity_skew)
    };
    let item_weight: Vec<f64> = (0..n).map(weight_of).collect();
    let own_pool = |g: usize| clusters[g].clone();
    let other_pool = |g: usize| -> Vec<usize> {
        (0..n).filter(|&v| spec.cluster_of(v) != g).collect()
    };
    let pools: Vec<(Vec<usize>, Vec<usize>)> = (0..2).map(|g| (own_pool(g), other_pool(g))).collect();
    let pool_weights: Vec<(Vec<f64>, Vec<f64>)> = pools
        .iter()
        .map(|(own, other)| {
            (
                own.iter().map(|&v| item_weight[v]).collect(),
                other.iter().map(|&v| item_weight[v]).collect(),
            )
        })
        .collect();

    let mut interactions = Vec::with_capacity(m * spec.interactions_per_user);
    for u in 0..m {
        let g = labels[u];
        let mut urng = rng::rng(rng::mix(spec.seed, &[0x5eed, u as u64]));
        let mut taken = vec![false; n];
        let (own, other) = &pools[g];
        let (own_w, other_w) = &pool_weights[g];
        for _ in 0..spec.interactions_per_user {
            let prefer_own = urng.random::<f64>() < spec.preference_mix;
            let first = if prefer_own { (own, own_w) } else { (other, other_w) };
            let second = if prefer_own { (other, other_w) } else { (own, own_w) };
            let v = weighted_distinct(first.0, first.1, &mut taken, &mut urng)
                .or_else(|| weighted_distinct(second.0, second.1, &mut taken, &mut urng))
                .expect("interactions_per_user <= item_count");
            taken[v] = true;
            interactions.push(Interaction { user: u, item: v, split: Split::Train });
        }
    }
    let titles = (0..n)
        .map(|v| {
            let c = spec.cluster_of(v);
            let j = v - clusters[c][0];
            format!("cluster{c}_item{j}")
        })
        .collect();
    let ds = InteractionDataset::new(
        (0..m).map(|u| u.to_string()).collect(),
        (0..n).map(|v| v.to_string()).collect(),
        interactions,
    )?;
    let truth = GroundTruthLabels::new(labels, 2, Visibility::Simulation)?;
    Ok((ds, truth, titles))
}

/// Loads `iid<TAB>title` metadata; items without an entry are named `item <raw id>`.
pub fn load_titles(path: &Path, ds: &InteractionDataset) -> Result<Vec<String>> {
    let reader = BufReader::new(File::open(path)?);
    let mut by_raw = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (iid, title) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(path, i + 1, "expected `iid<TAB>title`"))?;
        by_raw.insert(iid.trim().to_string(), title.trim().to_string());
    }
    Ok(ds
        .item_raw_ids()
        .iter()
        .map(|raw| by_raw.get(raw).cloned().unwrap_or_else(|| format!("item {raw}")))
        .collect())
}

/// Label files: `uid<TAB>label_name` (TSV) or MovieLens `users.dat`, where the
/// second field is `M`/`F` and is matched to the label names `male`/`female`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelFormat {
    Tsv,
    MovielensUsers,
}

pub fn load_labels(
    path: &Path,
    format: LabelFormat,
    ds: &InteractionDataset,
    label_names: &[String],
) -> Result<GroundTruthLabels> {
    let reader = BufReader::new(File::open(path)?);
    let mut by_raw: HashMap<String, usize> = HashMap::new();
    let lookup = |name: &str| {
        let lowered = name.to_lowercase();
        label_names.iter().position(|l| l.to_lowercase() == lowered)
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (uid, raw_label) = match format {
            LabelFormat::Tsv => line.split_once('\t').map(|(a, b)| (a.to_string(), b.trim().to_string())),
            LabelFormat::MovielensUsers => {
                let mut parts = line.split("::");
                match (parts.next(), parts.next()) {
                    (Some(u), Some(g)) => Some((
                        u.to_string(),
                        match g.trim() {
                            "M" => "male".to_string(),
                            "F" => "female".to_string(),
                            other => other.to_string(),
                        },
                    )),
                    _ => None,
                }
            }
        }
        .ok_or_else(|| parse_err(path, i + 1, "malformed label row"))?;
        let label = lookup(&raw_label)
            .or_else(|| raw_label.parse::<usize>().ok().filter(|&l| l < label_names.len()))
            .ok_or_else(|| parse_err(path, i + 1, format!("unknown label {raw_label:?}")))?;
        by_raw.insert(uid.trim().to_string(), label);
    }
    let labels = ds
        .user_raw_ids()
        .iter()
        .map(|raw| {
            by_raw
                .get(raw)
                .copied()
                .ok_or_else(|| Error::invalid(format!("no label for user {raw}")))
        })
        .collect::<Result<Vec<_>>>()?;
    GroundTruthLabels::new(labels, label_names.len(), Visibility::TestOnly)
}

/// Writes `uid<TAB>iid<TAB>{train|val|test}` with dense indices, in insertion order.
pub fn write_split_file(path: &Path, ds: &InteractionDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for it in &ds.interactions {
        writeln!(w, "{}\t{}\t{}", it.user, it.item, it.split)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a split file written by [`write_split_file`]; raw ids come from the
/// supplied id lists, which also fix the user and item counts.
pub fn read_split_file(
    path: &Path,
    user_raw_ids: Vec<String>,
    item_raw_ids: Vec<String>,
) -> Result<InteractionDataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut interactions = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(parse_err(path, i + 1, "expected `uid<TAB>iid<TAB>tag`"));
        }
        let user = parts[0].parse().map_err(|_| parse_err(path, i + 1, "bad user index"))?;
        let item = parts[1].parse().map_err(|_| parse_err(path, i + 1, "bad item index"))?;
        let split = parts[2].parse().map_err(|e: Error| parse_err(path, i + 1, e.to_string()))?;
        interactions.push(Interaction { user, item, split });
    }
    InteractionDataset::new(user_raw_ids, item_raw_ids, interactions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn write_tmp(contents: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ratings.dat");
        std::fs::write(&path, contents).unwrap();
        (dir, path)
    }

    #[test]
    fn single_row_movielens_file() {
        let (_d, path) = write_tmp("1::7::5::964982703\n");
        let ds = load_interactions(&path, InteractionFormat::MovielensDat).unwrap();
        assert_eq!((ds.user_count(), ds.item_count()), (1, 1));
        assert_eq!(ds.pairs(Split::Train), vec![(0, 0)]);
    }

    #[test]
    fn zero_ratings_are_not_feedback() {
        let (_d, path) = write_tmp("1::7::0::1\n1::8::4::2\n");
        let ds = load_interactions(&path, InteractionFormat::MovielensDat).unwrap();
        assert_eq!(ds.item_raw_ids(), &["8".to_string()]);
        assert_eq!(ds.pairs(Split::Train), vec![(0, 0)]);
    }

    #[test]
    fn tsv_without_rating_column() {
        let (_d, path) = write_tmp("u1\ti1\nu2\ti1\nu1\ti2\n");
        let ds = load_interactions(&path, InteractionFormat::Tsv).unwrap();
        assert_eq!((ds.user_count(), ds.item_count()), (2, 2));
        assert_eq!(ds.interactions().len(), 3);
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let (_d, path) = write_tmp("1::7::5::1\n1::oops\n2\n");
        match load_interactions(&path, InteractionFormat::MovielensDat) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let (_d, path) = write_tmp("1::7::five::1\n");
        assert!(matches!(
            load_interactions(&path, InteractionFormat::MovielensDat),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn empty_file_is_an_error() {
        let (_d, path) = write_tmp("");
        assert!(matches!(
            load_interactions(&path, InteractionFormat::Tsv),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn star_graph_collapses() {
        let pairs: Vec<_> = (0..10).map(|v| (0, v)).collect();
        let ds = InteractionDataset::from_pairs(1, 10, &pairs).unwrap();
        assert!(matches!(core_filter(&ds, 10), Err(Error::EmptyAfterFilter { k: 10 })));
    }

    #[test]
    fn complete_bipartite_survives() {
        let pairs: Vec<_> = (0..12).flat_map(|u| (0..12).map(move |v| (u, v))).collect();
        let ds = InteractionDataset::from_pairs(12, 12, &pairs).unwrap();
        assert_eq!(core_filter(&ds, 10).unwrap(), ds);
    }

    /// Independent oracle: repeatedly delete one offending node at a time.
    fn oracle_core(pairs: &BTreeSet<(usize, usize)>, k: usize) -> BTreeSet<(usize, usize)> {
        let mut edges = pairs.clone();
        loop {
            let mut udeg = std::collections::BTreeMap::new();
            let mut ideg = std::collections::BTreeMap::new();
            for &(u, v) in &edges {
                *udeg.entry(u).or_insert(0) += 1;
                *ideg.entry(v).or_insert(0) += 1;
            }
            if let Some((&u, _)) = udeg.iter().find(|(_, &d)| d < k) {
                edges.retain(|&(x, _)| x != u);
                continue;
            }
            if let Some((&v, _)) = ideg.iter().find(|(_, &d)| d < k) {
                edges.retain(|&(_, y)| y != v);
                continue;
            }
            return edges;
        }
    }

    #[test]
    fn core_filter_matches_deletion_oracle() {
        let mut r = rng::rng(11);
        let mut pairs = BTreeSet::new();
        for u in 0..50usize {
            let deg = r.random_range(2..30);
            for _ in 0..deg {
                pairs.insert((u, r.random_range(0..50usize)));
            }
        }
        let list: Vec<_> = pairs.iter().copied().collect();
        let ds = InteractionDataset::from_pairs(50, 50, &list).unwrap();
        let expected = oracle_core(&pairs, 8);
        assert!(!expected.is_empty());
        let filtered = core_filter(&ds, 8).unwrap();
        let got: BTreeSet<(usize, usize)> = filtered
            .pairs(Split::Train)
            .into_iter()
            .map(|(u, v)| {
                (
                    filtered.user_raw_ids()[u].parse().unwrap(),
                    filtered.item_raw_ids()[v].parse().unwrap(),
                )
            })
            .collect();
        assert_eq!(got, expected);
        for u in 0..filtered.user_count() {
            assert!(filtered.user_degree(u) >= 8);
        }
        assert!(got.len() < list.len());
        assert_eq!(core_filter(&filtered, 8).unwrap(), filtered);
    }

    fn user_with(n: usize) -> InteractionDataset {
        let pairs: Vec<_> = (0..n).map(|v| (0, v)).collect();
        InteractionDataset::from_pairs(1, n, &pairs).unwrap()
    }

    #[test]
    fn ten_interactions_split_8_1_1() {
        let ds = split_per_user(&user_with(10), SplitRatios::default(), 3).unwrap();
        assert_eq!(ds.split_sizes(0), (8, 1, 1));
    }

    #[test]
    fn seven_interactions_follow_rounding_rule() {
        let ds = split_per_user(&user_with(7), SplitRatios::default(), 3).unwrap();
        // Rule oracle: floor(0.1 * 7) = 0, raised to the one-item minimum for val and test.
        let floor = (0.1f64 * 7.0).floor() as usize;
        let expected_val = floor.max(1);
        assert_eq!(ds.split_sizes(0), (7 - 2 * expected_val, expected_val, expected_val));
        assert_eq!(ds.split_sizes(0), (5, 1, 1));
    }

    #[test]
    fn split_is_deterministic_and_rejects_tiny_users() {
        let base = user_with(25);
        let a = split_per_user(&base, SplitRatios::default(), 9).unwrap();
        let b = split_per_user(&base, SplitRatios::default(), 9).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            split_per_user(&user_with(2), SplitRatios::default(), 9),
            Err(Error::Split { user: 0, count: 2 })
        ));
    }

    #[test]
    fn history_in_insertion_order() {
        let ds = InteractionDataset::from_pairs(2, 10, &[(0, 3), (1, 4), (0, 9)]).unwrap();
        assert_eq!(ds.user_history(0, Split::Train).unwrap(), vec![3, 9]);
        assert!(ds.user_history(0, Split::Test).unwrap().is_empty());
        assert!(matches!(ds.user_history_tag(0, "holdout"), Err(Error::Argument(_))));
        assert!(ds.user_history(5, Split::Train).is_err());
    }

    #[test]
    fn full_mix_keeps_users_in_their_cluster() {
        let spec = SyntheticSpec {
            user_count: 60,
            item_count: 80,
            preference_mix: 1.0,
            interactions_per_user: 12,
            seed: 4,
            ..Default::default()
        };
        let (ds, truth, titles) = generate_synthetic(&spec).unwrap();
        for it in ds.interactions() {
            assert_eq!(spec.cluster_of(it.item), truth.labels[it.user]);
        }
        assert_eq!(titles[0], "cluster0_item0");
        assert_eq!(titles[40], "cluster1_item0");
        assert_eq!(truth.visibility, Visibility::Simulation);
    }

    #[test]
    fn half_mix_matches_binomial() {
        let spec = SyntheticSpec {
            user_count: 500,
            item_count: 400,
            preference_mix: 0.5,
            interactions_per_user: 10,
            seed: 8,
            ..Default::default()
        };
        let (ds, truth, _) = generate_synthetic(&spec).unwrap();
        let n = ds.interactions().len() as f64;
        let inside = ds
            .interactions()
            .iter()
            .filter(|it| spec.cluster_of(it.item) == truth.labels[it.user])
            .count() as f64;
        let se = (0.25 / n).sqrt();
        assert!((inside / n - 0.5).abs() < 3.0 * se, "fraction {}", inside / n);
    }

    #[test]
    fn synthetic_is_deterministic_and_guards_infeasible_specs() {
        let spec = SyntheticSpec { user_count: 30, item_count: 40, interactions_per_user: 10, seed: 1, ..Default::default() };
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let bad = SyntheticSpec { interactions_per_user: 41, ..spec };
        assert!(matches!(generate_synthetic(&bad), Err(Error::InfeasibleSpec(_))));
    }

    #[test]
    fn swapping_groups_mirrors_clusters() {
        // With group_ratio r and 1 - r, the two datasets are isomorphic under
        // the cluster swap: per-user in-cluster counts match as multisets.
        let base = SyntheticSpec { user_count: 200, item_count: 100, preference_mix: 0.9, seed: 5, ..Default::default() };
        let (ds, truth, _) = generate_synthetic(&base).unwrap();
        let inside = |ds: &InteractionDataset, truth: &GroundTruthLabels| {
            let mut counts: Vec<usize> = (0..ds.user_count())
                .map(|u| {
                    ds.known_items(u)
                        .iter()
                        .filter(|&&v| base.cluster_of(v) == truth.labels[u])
                        .count()
                })
                .collect();
            counts.sort_unstable();
            counts
        };
        let flipped = GroundTruthLabels::new(truth.labels.iter().map(|&l| 1 - l).collect(), 2, Visibility::Simulation).unwrap();
        let mirrored: Vec<(usize, usize)> = ds
            .interactions()
            .iter()
            .map(|it| (it.user, base.item_count - 1 - it.item))
            .collect();
        let mirrored = InteractionDataset::from_pairs(ds.user_count(), ds.item_count(), &mirrored).unwrap();
        assert_eq!(inside(&ds, &truth), inside(&mirrored, &flipped));
    }

    #[test]
    fn split_file_round_trip() {
        let spec = SyntheticSpec { user_count: 20, item_count: 30, interactions_per_user: 10, seed: 2, ..Default::default() };
        let (ds, _, _) = generate_synthetic(&spec).unwrap();
        let ds = split_per_user(&ds, SplitRatios::default(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.tsv");
        write_split_file(&path, &ds).unwrap();
        let back = read_split_file(&path, ds.user_raw_ids().to_vec(), ds.item_raw_ids().to_vec()).unwrap();
        assert_eq!(back, ds);
    }

    proptest! {
        #[test]
        fn split_tags_partition_each_user(n in 3usize..60, seed in any::<u64>()) {
            let ds = split_per_user(&user_with(n), SplitRatios::default(), seed).unwrap();
            let (tr, va, te) = ds.split_sizes(0);
            prop_assert_eq!(tr + va + te, n);
            prop_assert!(tr >= 1);
            let exp = 0.1 * n as f64;
            prop_assert!((va as f64 - exp).abs() <= 1.0 && (te as f64 - exp).abs() <= 1.0);
        }

        #[test]
        fn core_filter_is_idempotent(edges in proptest::collection::btree_set((0usize..25, 0usize..25), 50..400)) {
            let list: Vec<_> = edges.into_iter().collect();
            let ds = InteractionDataset::from_pairs(25, 25, &list).unwrap();
            if let Ok(once) = core_filter(&ds, 5) {
                prop_assert_eq!(core_filter(&once, 5).unwrap(), once);
            }
        }
    }
}
