//! Attribute-inference attack: how well a small classifier recovers the
//! sensitive attribute from user embeddings.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::GroundTruthLabels;
use crate::nn::{softmax_rows, Adam, Gradients, Mlp};
use crate::rng;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackerConfig {
    pub hidden: usize,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Fraction of users reserved for AUC.
    pub test_fraction: f64,
    /// Fraction of attack-train users reserved for early stopping.
    pub holdout_fraction: f64,
}

impl Default for AttackerConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            lr: 3e-3,
            batch: 128,
            max_epochs: 200,
            patience: 10,
            test_fraction: 0.2,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub auc: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub attacker: String,
    pub epochs: usize,
}

/// Rank-sum AUC with mid-ranks for ties.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::arg("scores and labels differ in length"));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc("need both positive and negative examples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&o| positive[o]).count() as f64 * mid;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Macro one-vs-rest AUC over classes present in `labels`. With two classes
/// this is the binary AUC of the class-1 probability.
pub fn auc_macro(probs: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let arity = probs.ncols();
    if arity == 2 {
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return auc_binary(&probs.column(1).to_vec(), &pos);
    }
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..arity {
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if pos.iter().all(|&p| p) || !pos.iter().any(|&p| p) {
            continue;
        }
        total += auc_binary(&probs.column(c).to_vec(), &pos)?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::UndefinedAuc("no class has both positives and negatives".into()));
    }
    Ok(total / used as f64)
}

/// Per-class shuffled split, so both sides keep every class when possible.
fn stratified_split(labels: &[usize], arity: usize, frac: f64, r: &mut rng::Rng) -> (Vec<usize>, Vec<usize>) {
    let (mut keep, mut held) = (Vec::new(), Vec::new());
    for c in 0..arity {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(r);
        let n_held = ((idx.len() as f64) * frac).round() as usize;
        let n_held = if idx.len() >= 2 { n_held.clamp(1, idx.len() - 1) } else { 0 };
        held.extend_from_slice(&idx[..n_held]);
        keep.extend_from_slice(&idx[n_held..]);
    }
    keep.sort_unstable();
    held.sort_unstable();
    (keep, held)
}

fn cross_entropy(net: &Mlp, x: &Array2<f64>, y: &[usize]) -> f64 {
    let p = softmax_rows(&net.forward(x.view()));
    -y.iter().enumerate().map(|(i, &c)| p[[i, c]].max(1e-300).ln()).sum::<f64>() / y.len() as f64
}

/// Trains a `d -> hidden -> |A|` classifier on 80% of users (z-scored with
/// attack-train statistics) and reports AUC on the other 20%.
pub fn train_attacker(
    embeddings: &Array2<f64>,
    labels: &GroundTruthLabels,
    seed: u64,
    config: &AttackerConfig,
) -> Result<AttackReport> {
    let y_all = &labels.labels;
    if embeddings.nrows() != y_all.len() {
        return Err(Error::arg(format!(
            "{} embeddings for {} labels",
            embeddings.nrows(),
            y_all.len()
        )));
    }
    let present = (0..labels.arity).filter(|c| y_all.contains(c)).count();
    if present < 2 {
        return Err(Error::UndefinedAuc("labels contain a single class".into()));
    }
    let mut r = rng::named(seed, "attacker");
    let (train, test) = stratified_split(y_all, labels.arity, config.test_fraction, &mut r);
    let train_labels: Vec<usize> = train.iter().map(|&i| y_all[i]).collect();
    let (fit_pos, hold_pos) = stratified_split(&train_labels, labels.arity, config.holdout_fraction, &mut r);
    let fit: Vec<usize> = fit_pos.iter().map(|&i| train[i]).collect();
    let hold: Vec<usize> = hold_pos.iter().map(|&i| train[i]).collect();

    let train_x = embeddings.select(Axis(0), &train);
    let mean = train_x.mean_axis(Axis(0)).expect("non-empty train split");
    let std: Array1<f64> = train_x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let z = |idx: &[usize]| (embeddings.select(Axis(0), idx) - &mean) / &std;
    let (x_fit, x_hold, x_test) = (z(&fit), z(&hold), z(&test));
    let y_fit: Vec<usize> = fit.iter().map(|&i| y_all[i]).collect();
    let y_hold: Vec<usize> = hold.iter().map(|&i| y_all[i]).collect();
    let y_test: Vec<usize> = test.iter().map(|&i| y_all[i]).collect();

    let mut net = Mlp::new(&[embeddings.ncols(), config.hidden, labels.arity], &mut r);
    let mut adam = Adam::with_lr(config.lr);
    let mut best = (f64::INFINITY, net.clone(), 0usize);
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut epochs = 0;
    for epoch in 0..config.max_epochs {
        epochs = epoch + 1;
        order.shuffle(&mut r);
        for chunk in order.chunks(config.batch.max(1)) {
            let xb = x_fit.select(Axis(0), chunk);
            let (logits, cache) = net.forward_cached(xb.view());
            let mut d = softmax_rows(&logits);
            for (row, &i) in chunk.iter().enumerate() {
                d[[row, y_fit[i]]] -= 1.0;
            }
            d /= chunk.len() as f64;
            let mut g = Gradients::new();
            net.backward(&cache, &d, Some((&mut g, "attacker")));
            adam.step(&mut net, "attacker", &g);
        }
        let monitor = if hold.is_empty() {
            cross_entropy(&net, &x_fit, &y_fit)
        } else {
            cross_entropy(&net, &x_hold, &y_hold)
        };
        if monitor < best.0 {
            best = (monitor, net.clone(), epoch);
        } else if epoch - best.2 >= config.patience {
            break;
        }
    }
    let probs = softmax_rows(&best.1.forward(x_test.view()));
    let auc = auc_macro(&probs, &y_test)?;
    Ok(AttackReport {
        auc,
        n_train: train.len(),
        n_test: test.len(),
        seed,
        attacker: format!("mlp({}-{}-{})", embeddings.ncols(), config.hidden, labels.arity),
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Visibility;
    use proptest::prelude::*;
    use rand::Rng as _;
    use rand_distr::{Distribution, Normal};

    fn brute_auc(scores: &[f64], pos: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if pos[i] && !pos[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_extremes_and_ties() {
        assert_eq!(auc_binary(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc_binary(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(auc_binary(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert!(matches!(auc_binary(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedAuc(_))));
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_count(
            raw in prop::collection::vec((0u8..6, any::<bool>()), 2..40),
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64).collect();
            let pos: Vec<bool> = raw.iter().map(|r| r.1).collect();
            prop_assume!(pos.iter().any(|&p| p) && pos.iter().any(|&p| !p));
            let auc = auc_binary(&scores, &pos).unwrap();
            prop_assert!((auc - brute_auc(&scores, &pos)).abs() < 1e-12);
            let warped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() - 3.0).collect();
            prop_assert!((auc_binary(&warped, &pos).unwrap() - auc).abs() < 1e-12);
        }
    }

    fn gaussian_embeddings(n: usize, shift: f64, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut r = rng::rng(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        let x = Array2::from_shape_fn((n, 8), |(i, j)| {
            noise.sample(&mut r) + if j == 0 && labels[i] == 1 { shift } else { 0.0 }
        });
        (x, labels)
    }

    #[test]
    fn separable_embeddings_are_detected() {
        let (x, y) = gaussian_embeddings(400, 8.0, 1);
        let truth = GroundTruthLabels::new(y, 2, Visibility::TestOnly).unwrap();
        let rep = train_attacker(&x, &truth, 3, &AttackerConfig::default()).unwrap();
        assert!(rep.auc >= 0.99, "{}", rep.auc);
        assert_eq!(rep.n_train + rep.n_test, 400);
        assert_eq!(rep.n_test, 80);
    }

    #[test]
    fn shuffled_labels_are_near_chance() {
        let (x, _) = gaussian_embeddings(500, 0.0, 2);
        let mut total = 0.0;
        for seed in 0..10 {
            let mut r = rng::rng(100 + seed);
            let y: Vec<usize> = (0..500).map(|_| r.random_range(0..2)).collect();
            let truth = GroundTruthLabels::new(y, 2, Visibility::TestOnly).unwrap();
            total += train_attacker(&x, &truth, seed, &AttackerConfig::default()).unwrap().auc;
        }
        assert!((total / 10.0 - 0.5).abs() <= 0.05, "{}", total / 10.0);
    }

    #[test]
    fn single_class_is_undefined() {
        let x = Array2::zeros((10, 2));
        let truth = GroundTruthLabels::new(vec![1; 10], 2, Visibility::TestOnly).unwrap();
        assert!(matches!(
            train_attacker(&x, &truth, 0, &AttackerConfig::default()),
            Err(Error::UndefinedAuc(_))
        ));
    }

    #[test]
    fn three_classes_use_macro_auc() {
        let probs = ndarray::array![[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]];
        assert_eq!(auc_macro(&probs, &[0, 1, 2]).unwrap(), 1.0);
    }
}
