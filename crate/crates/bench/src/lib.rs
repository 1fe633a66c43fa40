//! Fixtures shared by the benchmarks.

use blindrec::data::{generate_synthetic, split_per_user, SplitRatios, SyntheticSpec};
use blindrec::encoders::{epoch_batches, sample_negatives, BprBatch, EmbeddingTables};
use blindrec::{rng, InteractionDataset};
use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;

/// A split synthetic dataset of the given size.
pub fn dataset(users: usize, items: usize) -> InteractionDataset {
    let spec = SyntheticSpec { user_count: users, item_count: items, interactions_per_user: 20, seed: 7, ..Default::default() };
    let (ds, _, _) = generate_synthetic(&spec).expect("valid spec");
    split_per_user(&ds, SplitRatios::default(), 7).expect("enough interactions")
}

pub fn tables(ds: &InteractionDataset, dim: usize) -> EmbeddingTables {
    EmbeddingTables::init(ds.user_count(), ds.item_count(), dim, 0.1, 7)
}

/// The first BPR batch of epoch 0.
pub fn bpr_batch(ds: &InteractionDataset, size: usize) -> BprBatch {
    let pairs = epoch_batches(ds, size, 7, 0).swap_remove(0);
    sample_negatives(ds, &pairs, 7).expect("negatives exist")
}

/// Standard-normal rows from the crate's seeded generator.
pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::rng(seed);
    Array2::from_shape_fn((rows, cols), |_| r.sample(StandardNormal))
}
