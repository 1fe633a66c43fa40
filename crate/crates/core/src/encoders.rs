//! Matrix-factorization collaborative encoder trained with BPR, and the frozen
//! pretrained copy that supplies the reference embeddings for stage 2.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::TrainingConfig;
use crate::data::{InteractionDataset, Split};
use crate::eval::ranking::{self, Factorized};
use crate::nn::{gather_rows, softplus, sigmoid, Adam, Gradients, Parameterized};
use crate::rng;
use crate::{Error, Result};

pub const USERS: &str = "tables.users";
pub const ITEMS: &str = "tables.items";

/// User and item embedding tables (`M x d`, `N x d`).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTables {
    pub users: Array2<f64>,
    pub items: Array2<f64>,
}

impl EmbeddingTables {
    /// Seeded normal initialization with standard deviation `std`.
    pub fn init(user_count: usize, item_count: usize, dim: usize, std: f64, seed: u64) -> Self {
        let mut r = rng::rng(seed);
        let normal = Normal::new(0.0, std).expect("valid std");
        let users = Array2::from_shape_fn((user_count, dim), |_| normal.sample(&mut r));
        let items = Array2::from_shape_fn((item_count, dim), |_| normal.sample(&mut r));
        Self { users, items }
    }

    pub fn dim(&self) -> usize {
        self.users.ncols()
    }

    pub fn all_finite(&self) -> bool {
        self.users.iter().chain(self.items.iter()).all(|x| x.is_finite())
    }
}

impl Parameterized for EmbeddingTables {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        let p = if prefix.is_empty() { "tables".to_string() } else { format!("{prefix}.tables") };
        f(&format!("{p}.users"), self.users.as_slice_mut().unwrap());
        f(&format!("{p}.items"), self.items.as_slice_mut().unwrap());
    }
}

/// Inner-product preference score of user `u` for item `v`.
pub fn score(tables: &EmbeddingTables, u: usize, v: usize) -> Result<f64> {
    if u >= tables.users.nrows() || v >= tables.items.nrows() {
        return Err(Error::arg(format!("score index ({u}, {v}) out of range")));
    }
    Ok(tables.users.row(u).dot(&tables.items.row(v)))
}

/// Frozen collaborative model. Exposes read-only views only.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainedCF {
    tables: EmbeddingTables,
    pub epoch: usize,
    pub val_recall: f64,
}

impl PretrainedCF {
    pub fn freeze(tables: EmbeddingTables, epoch: usize, val_recall: f64) -> Self {
        Self { tables, epoch, val_recall }
    }

    pub fn tables(&self) -> &EmbeddingTables {
        &self.tables
    }

    pub fn user(&self, u: usize) -> ArrayView1<'_, f64> {
        self.tables.users.row(u)
    }

    pub fn users(&self) -> ArrayView2<'_, f64> {
        self.tables.users.view()
    }

    pub fn items(&self) -> ArrayView2<'_, f64> {
        self.tables.items.view()
    }
}

/// `(user, positive, negative)` triplets.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BprBatch {
    pub triplets: Vec<(usize, usize, usize)>,
}

impl BprBatch {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn users(&self) -> Vec<usize> {
        self.triplets.iter().map(|t| t.0).collect()
    }

    pub fn positives(&self) -> Vec<usize> {
        self.triplets.iter().map(|t| t.1).collect()
    }

    pub fn negatives(&self) -> Vec<usize> {
        self.triplets.iter().map(|t| t.2).collect()
    }
}

/// Pairs each positive with a uniformly drawn item outside the user's full history.
pub fn sample_negatives(ds: &InteractionDataset, pairs: &[(usize, usize)], seed: u64) -> Result<BprBatch> {
    let n = ds.item_count();
    let mut r = rng::rng(seed);
    let mut triplets = Vec::with_capacity(pairs.len());
    for &(u, v) in pairs {
        if ds.known_items(u).len() >= n {
            return Err(Error::Sampling(format!("user {u} interacted with every item")));
        }
        let neg = loop {
            let cand = r.random_range(0..n);
            if !ds.has_interaction(u, cand) {
                break cand;
            }
        };
        triplets.push((u, v, neg));
    }
    Ok(BprBatch { triplets })
}

/// Loss and gradients of mean BPR over aligned rows.
#[derive(Clone, Debug)]
pub struct BprTerms {
    pub loss: f64,
    pub d_user: Array2<f64>,
    pub d_pos: Array2<f64>,
    pub d_neg: Array2<f64>,
}

/// `mean(-ln σ(u·v⁺ - u·v⁻))` with gradients for every row.
pub fn bpr_terms(users: &Array2<f64>, pos: &Array2<f64>, neg: &Array2<f64>) -> BprTerms {
    let b = users.nrows();
    let mut loss = 0.0;
    let mut d_user = Array2::zeros(users.dim());
    let mut d_pos = Array2::zeros(pos.dim());
    let mut d_neg = Array2::zeros(neg.dim());
    for i in 0..b {
        let u = users.row(i);
        let (p, q) = (pos.row(i), neg.row(i));
        let margin = u.dot(&p) - u.dot(&q);
        loss += softplus(-margin);
        // d(-ln σ(x))/dx = σ(x) - 1
        let g = (sigmoid(margin) - 1.0) / b as f64;
        d_user.row_mut(i).assign(&((&p - &q) * g));
        d_pos.row_mut(i).assign(&(&u * g));
        d_neg.row_mut(i).assign(&(&u * -g));
    }
    BprTerms { loss: loss / b as f64, d_user, d_pos, d_neg }
}

/// Mean BPR loss of `batch` on `tables`, with gradients keyed [`USERS`]/[`ITEMS`].
pub fn bpr_loss(tables: &EmbeddingTables, batch: &BprBatch) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("BPR batch has no triplets".into()));
    }
    let (users, pos, neg) = (batch.users(), batch.positives(), batch.negatives());
    let m = tables.users.nrows();
    let n = tables.items.nrows();
    if users.iter().any(|&u| u >= m) || pos.iter().chain(&neg).any(|&v| v >= n) {
        return Err(Error::arg("BPR batch index out of range"));
    }
    let terms = bpr_terms(
        &gather_rows(&tables.users, &users),
        &gather_rows(&tables.items, &pos),
        &gather_rows(&tables.items, &neg),
    );
    let mut g = Gradients::new();
    g.add_rows(USERS, m, &users, &terms.d_user, 1.0);
    g.add_rows(ITEMS, n, &pos, &terms.d_pos, 1.0);
    g.add_rows(ITEMS, n, &neg, &terms.d_neg, 1.0);
    Ok((terms.loss, g))
}

/// Shuffled training pairs cut into batches for one epoch.
pub fn epoch_batches(ds: &InteractionDataset, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<(usize, usize)>> {
    let mut pairs = ds.pairs(Split::Train);
    pairs.shuffle(&mut rng::rng(rng::mix(seed, &[epoch as u64])));
    pairs.chunks(batch).map(<[_]>::to_vec).collect()
}

/// Negative-sampling seed of batch `index` in `epoch`.
pub fn batch_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    rng::mix(seed, &[epoch as u64, index as u64, 0xb9])
}

/// One BPR pass over the training split. Returns the mean batch loss.
pub fn train_bpr_epoch(
    tables: &mut EmbeddingTables,
    adam: &mut Adam,
    ds: &InteractionDataset,
    config: &TrainingConfig,
    seed: u64,
    epoch: usize,
) -> Result<f64> {
    let batches = epoch_batches(ds, config.bpr_batch, seed, epoch);
    let mut total = 0.0;
    for (i, pairs) in batches.iter().enumerate() {
        let batch = sample_negatives(ds, pairs, batch_seed(seed, epoch, i))?;
        let (loss, grads) = bpr_loss(tables, &batch)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Training { stage: "bpr", step: i, loss });
        }
        adam.step(tables, "", &grads);
        total += loss;
    }
    Ok(total / batches.len().max(1) as f64)
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    pub val_recall: f64,
}

/// Trains fresh tables with BPR, early-stopping on validation Recall@k, and
/// freezes the best epoch.
pub fn pretrain_cf(
    ds: &InteractionDataset,
    config: &TrainingConfig,
    seed: u64,
) -> Result<(PretrainedCF, Vec<EpochLog>)> {
    config.validate()?;
    if ds.pairs(Split::Train).is_empty() {
        return Err(Error::arg("dataset has no training interactions"));
    }
    let mut tables = EmbeddingTables::init(
        ds.user_count(),
        ds.item_count(),
        config.dim,
        config.init_std,
        rng::sub_seed(seed, "init"),
    );
    let mut adam = Adam::with_lr(config.lr);
    let neg_seed = rng::sub_seed(seed, "negatives");
    let k = config.eval_k.min(ds.item_count());
    let mut best = (tables.clone(), 0usize, f64::NEG_INFINITY);
    let mut stale = 0;
    let mut log = Vec::new();
    for epoch in 0..config.pretrain_epochs {
        let loss = train_bpr_epoch(&mut tables, &mut adam, ds, config, neg_seed, epoch)?;
        let recall = ranking::recall_at_k(&Factorized::new(&tables.users, &tables.items), ds, Split::Val, k)?.value;
        log::debug!("pretrain epoch {epoch}: loss {loss:.5} val recall@{k} {recall:.4}");
        log.push(EpochLog { stage: "pretrain".into(), epoch, loss, val_recall: recall });
        if recall > best.2 {
            best = (tables.clone(), epoch, recall);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok((PretrainedCF::freeze(best.0, best.1, best.2), log))
}
