//! Stage 2: a sensitive-blind preference representation trained with a CLUB
//! upper bound on `I(S; P)` and a conditional InfoNCE lower bound on the
//! information `P` keeps about the collaborative representation.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::config::{MiConfig, TrainingConfig};
use crate::data::{InteractionDataset, Split};
use crate::encoders::{batch_seed, bpr_terms, epoch_batches, sample_negatives, BprBatch, PretrainedCF, ITEMS, USERS};
use crate::eval::ranking::{recall_at_k, Factorized};
use crate::model::{FairModel, VariationalNet, CLS, CONFUSION, PREF, PROJ, SENS, VAR};
use crate::nn::{gather_rows, logsumexp, snapshot, Adam, Gradients};
use crate::rng;
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Norm floor inside cosine similarities.
pub const COSINE_EPS: f64 = 1e-12;

/// `ln N(s; μ, diag(exp(logvar)))`.
pub fn gaussian_loglik(s: ArrayView1<f64>, mu: ArrayView1<f64>, logvar: ArrayView1<f64>) -> f64 {
    s.iter()
        .zip(mu)
        .zip(logvar)
        .map(|((&s, &m), &lv)| -0.5 * (LN_2PI + lv + (s - m).powi(2) * (-lv).exp()))
        .sum()
}

/// Log-density of `s` under `q(· | p)`.
pub fn variational_loglik(net: &VariationalNet, s: ArrayView1<f64>, p: ArrayView1<f64>) -> Result<f64> {
    if s.len() != net.mu.output_dim() || p.len() != net.mu.input_dim() {
        return Err(Error::arg("dimension mismatch in variational log-likelihood"));
    }
    let out = net.forward(p.insert_axis(Axis(0)));
    Ok(gaussian_loglik(s, out.mu.row(0), out.logvar.row(0)))
}

/// Negative mean log-likelihood of aligned `(s, p)` rows and its gradients for
/// the variational network (under `var.*`). Minimizing it fits `q(s|p)`.
pub fn variational_nll(net: &VariationalNet, s: &Array2<f64>, p: &Array2<f64>) -> (f64, Gradients) {
    let b = s.nrows() as f64;
    let out = net.forward(p.view());
    let mut nll = 0.0;
    let mut d_mu = Array2::zeros(s.dim());
    let mut d_lv = Array2::zeros(s.dim());
    for ((((&s, &m), &lv), dm), dl) in s
        .iter()
        .zip(&out.mu)
        .zip(&out.logvar)
        .zip(d_mu.iter_mut())
        .zip(d_lv.iter_mut())
    {
        let inv = (-lv).exp();
        nll += 0.5 * (LN_2PI + lv + (s - m).powi(2) * inv) / b;
        *dm = -(s - m) * inv / b;
        *dl = 0.5 * (1.0 - (s - m).powi(2) * inv) / b;
    }
    let mut g = Gradients::new();
    net.backward(&out, &d_mu, &d_lv, Some((&mut g, VAR)));
    (nll, g)
}

/// CLUB estimate from per-row Gaussian parameters: mean over `u` of
/// `ln q(s_u|p_u) − mean_{u'} ln q(s_{u'}|p_u)`. Returns the value and its
/// gradients w.r.t. `mu` and `logvar` (`s` is treated as constant).
pub fn ub_terms(s: &Array2<f64>, mu: &Array2<f64>, logvar: &Array2<f64>) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let b = s.nrows();
    if b < 2 {
        return Err(Error::DegenerateBatch(format!("CLUB needs at least 2 rows, got {b}")));
    }
    let m1 = s.mean_axis(Axis(0)).unwrap();
    let m2 = s.mapv(|x| x * x).mean_axis(Axis(0)).unwrap();
    let mut d_mu = Array2::zeros(mu.dim());
    let mut d_lv = Array2::zeros(mu.dim());
    for u in 0..b {
        for k in 0..s.ncols() {
            let (m, lv) = (mu[[u, k]], logvar[[u, k]]);
            let inv = (-lv).exp();
            // Constants and log-variance terms cancel between the two parts.
            let cross = m2[k] - 2.0 * m * m1[k] + m * m;
            let term = 0.5 * inv * (cross - (s[[u, k]] - m).powi(2));
            d_mu[[u, k]] = inv * (s[[u, k]] - m1[k]) / b as f64;
            d_lv[[u, k]] = -term / b as f64;
        }
    }
    // The value is summed over unordered pairs so that a batch-constant
    // q(s|p) gives exactly zero: the two directions of a pair then cancel.
    let inv = logvar.mapv(|lv| (-lv).exp());
    let fit = |u: usize, v: usize| -> f64 {
        (0..s.ncols()).map(|k| 0.5 * inv[[u, k]] * (s[[v, k]] - mu[[u, k]]).powi(2)).sum()
    };
    let own: Vec<f64> = (0..b).map(|u| fit(u, u)).collect();
    let mut loss = 0.0;
    for u in 0..b {
        for v in u + 1..b {
            loss += (fit(u, v) - own[u]) + (fit(v, u) - own[v]);
        }
    }
    Ok((loss / (b * b) as f64, d_mu, d_lv))
}

/// CLUB upper-bound loss for aligned `s` and `p` rows. The variational net is
/// frozen; returns the loss and `dL/dp`.
pub fn loss_ub(net: &VariationalNet, s: &Array2<f64>, p: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let out = net.forward(p.view());
    let (loss, d_mu, d_lv) = ub_terms(s, &out.mu, &out.logvar)?;
    Ok((loss, net.backward(&out, &d_mu, &d_lv, None)))
}

/// In-batch InfoNCE on a score matrix whose diagonal holds the positives:
/// mean over rows of `−f_uu + ln Σ_j f_uj`. Always `≥ 0`; `ln B − loss` is
/// the mutual-information estimate. Returns the loss and `dL/dscores`.
pub fn info_nce(scores: &Array2<f64>) -> (f64, Array2<f64>) {
    let b = scores.nrows();
    let mut d = Array2::zeros(scores.dim());
    let mut loss = 0.0;
    for u in 0..b {
        let row = scores.row(u);
        let lse = logsumexp(row.iter().copied());
        loss += lse - row[u];
        for j in 0..b {
            d[[u, j]] = ((row[j] - lse).exp() - if j == u { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    (loss / b as f64, d)
}

/// `scores[u, j] = cos(h_u, r_j)` and a closure-free backward helper.
pub fn cosine_scores(h: &Array2<f64>, r: &Array2<f64>) -> Array2<f64> {
    let hn = unit_rows(h);
    let rn = unit_rows(r);
    hn.dot(&rn.t())
}

fn row_norms(x: &Array2<f64>) -> Vec<f64> {
    x.rows().into_iter().map(|r| r.dot(&r).sqrt().max(COSINE_EPS)).collect()
}

fn unit_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for (mut row, n) in out.rows_mut().into_iter().zip(row_norms(x)) {
        row /= n;
    }
    out
}

/// Gradient w.r.t. `h` of `Σ d_scores[u, j] · cos(h_u, r_j)`.
pub fn cosine_backward_h(h: &Array2<f64>, r: &Array2<f64>, d_scores: &Array2<f64>) -> Array2<f64> {
    let norms = row_norms(h);
    let hn = unit_rows(h);
    let rn = unit_rows(r);
    // d cos / d h = (r̂ − cos · ĥ) / |h|
    let mut dh = d_scores.dot(&rn);
    for (u, mut row) in dh.rows_mut().into_iter().enumerate() {
        let proj = row.dot(&hn.row(u));
        row.scaled_add(-proj, &hn.row(u));
        row /= norms[u];
    }
    dh
}

/// Conditional InfoNCE lower-bound loss with score `cos(r_j, p_u + α s_u)`.
/// `r` rows come from the frozen collaborative model and `s` is constant.
/// Returns the loss and `dL/dp`.
pub fn loss_lb(r: &Array2<f64>, s: &Array2<f64>, p: &Array2<f64>, alpha: f64) -> (f64, Array2<f64>) {
    let h = p + &(s * alpha);
    let scores = cosine_scores(&h, r);
    let (loss, d_scores) = info_nce(&scores);
    (loss, cosine_backward_h(&h, r, &d_scores))
}

/// Item-side InfoNCE between current item rows and their frozen counterparts.
/// Returns the loss and `dL/dv`.
pub fn loss_item_lb(r_items: &Array2<f64>, v: &Array2<f64>) -> (f64, Array2<f64>) {
    let scores = cosine_scores(v, r_items);
    let (loss, d_scores) = info_nce(&scores);
    (loss, cosine_backward_h(v, r_items, &d_scores))
}

/// One outer step's data.
#[derive(Clone, Debug, PartialEq)]
pub struct MiBatch {
    pub bpr: BprBatch,
    /// Users for the bound terms.
    pub users: Vec<usize>,
    /// Items for the optional item-side term.
    pub items: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BLoss {
    pub total: f64,
    pub bpr: f64,
    pub ub: f64,
    pub lb: f64,
    pub item_lb: f64,
}

/// `L_bpr + λ_ub L_ub + λ_lb L_lb` (plus the item-side term when enabled),
/// with gradients for the tables and the preference encoder only.
pub fn loss_b(
    model: &FairModel,
    pretrained: &PretrainedCF,
    batch: &MiBatch,
    mi: &MiConfig,
) -> Result<(BLoss, Gradients)> {
    let (m, n) = (model.dims.users, model.dims.items);
    let mut g = Gradients::new();
    let mut out = BLoss::default();

    // BPR on preference scores p_u · v.
    let bu = batch.bpr.users();
    let (bp, bn) = (batch.bpr.positives(), batch.bpr.negatives());
    if bu.is_empty() {
        return Err(Error::EmptyBatch("BPR batch has no triplets".into()));
    }
    let u_rows = gather_rows(&model.tables.users, &bu);
    let (p, p_cache) = model.pref.forward_cached(u_rows.view());
    let terms = bpr_terms(&p, &gather_rows(&model.tables.items, &bp), &gather_rows(&model.tables.items, &bn));
    out.bpr = terms.loss;
    g.add_rows(ITEMS, n, &bp, &terms.d_pos, 1.0);
    g.add_rows(ITEMS, n, &bn, &terms.d_neg, 1.0);
    let du = model.pref.backward(&p_cache, &terms.d_user, Some((&mut g, PREF)));
    g.add_rows(USERS, m, &bu, &du, 1.0);

    // Bound terms on a separate user batch.
    if mi.lambda_ub > 0.0 || mi.lambda_lb > 0.0 {
        let u_rows = gather_rows(&model.tables.users, &batch.users);
        let (p, p_cache) = model.pref.forward_cached(u_rows.view());
        let s = model.sens.forward(u_rows.view());
        let mut dp = Array2::zeros(p.dim());
        if mi.lambda_ub > 0.0 {
            let (ub, d) = loss_ub(&model.var, &s, &p)?;
            out.ub = ub;
            dp.scaled_add(mi.lambda_ub, &d);
        }
        if mi.lambda_lb > 0.0 {
            let r = gather_rows(&pretrained.tables().users, &batch.users);
            let (lb, d) = loss_lb(&r, &s, &p, mi.alpha);
            out.lb = lb;
            dp.scaled_add(mi.lambda_lb, &d);
        }
        let du = model.pref.backward(&p_cache, &dp, Some((&mut g, PREF)));
        g.add_rows(USERS, m, &batch.users, &du, 1.0);
    }
    if mi.item_side_lb && mi.lambda_lb > 0.0 && !batch.items.is_empty() {
        let v = gather_rows(&model.tables.items, &batch.items);
        let r = gather_rows(&pretrained.tables().items, &batch.items);
        let (lb, dv) = loss_item_lb(&r, &v);
        out.item_lb = lb;
        g.add_rows(ITEMS, n, &batch.items, &dv, mi.lambda_lb);
    }
    out.total = out.bpr + mi.lambda_ub * out.ub + mi.lambda_lb * (out.lb + out.item_lb);
    Ok((out, g))
}

/// Per-epoch stage-2 record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Log {
    pub epoch: usize,
    pub loss: f64,
    pub ub: f64,
    pub lb: f64,
    pub variational_nll: f64,
    pub val_recall: f64,
}

fn sample_users(count: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut v = index::sample(&mut rng::rng(seed), count, size.min(count)).into_vec();
    v.sort_unstable();
    v
}

/// Parameters that must stay bit-identical through stage 2.
fn frozen_snapshot(model: &mut FairModel) -> BTreeMap<String, Vec<f64>> {
    snapshot(model, "")
        .into_iter()
        .filter(|(k, _)| [SENS, CLS, CONFUSION, PROJ].iter().any(|p| k.starts_with(&format!("{p}."))))
        .collect()
}

/// Each outer step: `inner_steps` updates of the variational net on fresh
/// user batches (encoders fixed), then one update of tables and preference
/// encoder on `L_b` (variational net fixed, sensitive encoder forward-only).
/// The epoch with the best validation Recall@k on `p_u · v` is kept.
pub fn train_stage2(
    model: &mut FairModel,
    ds: &InteractionDataset,
    pretrained: &PretrainedCF,
    config: &TrainingConfig,
    seed: u64,
) -> Result<Vec<Stage2Log>> {
    config.validate()?;
    if pretrained.tables().users.dim() != model.tables.users.dim() {
        return Err(Error::arg("pretrained tables do not match the model"));
    }
    let mi = &config.mi;
    let neg_seed = rng::sub_seed(seed, "stage2-negatives");
    let user_seed = rng::sub_seed(seed, "stage2-users");
    let mut adam = Adam::with_lr(config.lr);
    let mut var_adam = Adam::with_lr(mi.variational_lr);
    let k = config.eval_k.min(ds.item_count());
    let frozen = frozen_snapshot(model);
    let mut best: Option<(f64, FairModel)> = None;
    let mut stale = 0;
    let mut logs = Vec::new();
    for epoch in 0..config.stage2_epochs {
        let batches = epoch_batches(ds, config.bpr_batch, neg_seed, epoch);
        let (mut tot, mut ub, mut lb, mut nll) = (0.0, 0.0, 0.0, 0.0);
        for (i, pairs) in batches.iter().enumerate() {
            let step_seed = rng::mix(user_seed, &[epoch as u64, i as u64]);
            if mi.lambda_ub > 0.0 {
                for inner in 0..mi.inner_steps {
                    let users = sample_users(ds.user_count(), config.mi_batch, rng::mix(step_seed, &[inner as u64 + 1]));
                    let u_rows = gather_rows(&model.tables.users, &users);
                    let s = model.sens.forward(u_rows.view());
                    let p = model.pref.forward(u_rows.view());
                    let (l, g) = variational_nll(&model.var, &s, &p);
                    if !l.is_finite() || !g.all_finite() {
                        return Err(Error::Training { stage: "stage2-variational", step: i, loss: l });
                    }
                    var_adam.step(&mut model.var, VAR, &g);
                    nll += l / mi.inner_steps as f64;
                }
            }
            let batch = MiBatch {
                bpr: sample_negatives(ds, pairs, batch_seed(neg_seed, epoch, i))?,
                users: sample_users(ds.user_count(), config.mi_batch, step_seed),
                items: if mi.item_side_lb {
                    sample_users(ds.item_count(), config.mi_batch, rng::mix(step_seed, &[0x17e5]))
                } else {
                    Vec::new()
                },
            };
            let (l, g) = loss_b(model, pretrained, &batch, mi)?;
            if !l.total.is_finite() || !g.all_finite() {
                return Err(Error::Training { stage: "stage2", step: i, loss: l.total });
            }
            adam.step(model, "", &g);
            tot += l.total;
            ub += l.ub;
            lb += l.lb;
        }
        if frozen_snapshot(model) != frozen {
            return Err(Error::Training { stage: "stage2-freeze", step: epoch, loss: f64::NAN });
        }
        let steps = batches.len().max(1) as f64;
        let p_all = model.fair_embeddings();
        let recall = recall_at_k(&Factorized::new(&p_all, &model.tables.items), ds, Split::Val, k)?.value;
        log::debug!("stage2 epoch {epoch}: loss {:.5} ub {:.5} lb {:.5} val recall {recall:.4}", tot / steps, ub / steps, lb / steps);
        logs.push(Stage2Log {
            epoch,
            loss: tot / steps,
            ub: ub / steps,
            lb: lb / steps,
            variational_nll: nll / steps,
            val_recall: recall,
        });
        if best.as_ref().is_none_or(|b| recall > b.0) {
            best = Some((recall, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EmbeddingTables;
    use crate::model::ModelDims;
    use crate::sensitive::tests::check_grads;
    use ndarray::array;
    use rand::Rng as _;

    #[test]
    fn gaussian_density_examples() {
        let z = array![0.0];
        assert!((gaussian_loglik(z.view(), z.view(), z.view()) + 0.9189).abs() < 1e-4);
        let s = array![1.0, 1.0];
        let mu = array![0.0, 0.0];
        let lv = array![0.0, 0.0];
        assert!((gaussian_loglik(s.view(), mu.view(), lv.view()) + 2.8379).abs() < 1e-4);
        let far = array![2.0, 1.0];
        assert!(gaussian_loglik(far.view(), mu.view(), lv.view()) < gaussian_loglik(s.view(), mu.view(), lv.view()));
    }

    fn direct_club(s: &Array2<f64>, mu: &Array2<f64>, lv: &Array2<f64>) -> f64 {
        let b = s.nrows();
        let mut total = 0.0;
        for u in 0..b {
            let pos = gaussian_loglik(s.row(u), mu.row(u), lv.row(u));
            let neg: f64 = (0..b).map(|j| gaussian_loglik(s.row(j), mu.row(u), lv.row(u))).sum::<f64>() / b as f64;
            total += pos - neg;
        }
        total / b as f64
    }

    #[test]
    fn club_matches_direct_two_term_arithmetic() {
        let s = array![[0.5, -1.0], [1.5, 0.2]];
        let mu = array![[0.4, -0.8], [1.0, 0.0]];
        let lv = array![[0.0, 0.3], [-0.5, 0.1]];
        let (l, _, _) = ub_terms(&s, &mu, &lv).unwrap();
        assert!((l - direct_club(&s, &mu, &lv)).abs() < 1e-12);
        assert!(matches!(ub_terms(&s.slice(ndarray::s![..1, ..]).to_owned(), &mu, &lv), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn club_is_zero_for_constant_distribution() {
        let s = array![[0.5, -1.0], [1.5, 0.2], [0.0, 0.0]];
        let mu = Array2::from_shape_fn((3, 2), |(_, k)| [0.3, -0.2][k]);
        let lv = Array2::from_shape_fn((3, 2), |(_, k)| [0.1, -0.4][k]);
        assert!(ub_terms(&s, &mu, &lv).unwrap().0.abs() < 1e-15);
    }

    #[test]
    fn info_nce_examples() {
        assert_eq!(info_nce(&array![[0.7]]).0, 0.0);
        let (l, _) = info_nce(&array![[0.3, 0.3], [0.3, 0.3]]);
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let sc: Array2<f64> = array![[0.9, 0.1, -0.2], [0.3, 0.5, 0.4], [-0.6, 0.2, 0.8]];
        let want: f64 = (0..3)
            .map(|u| -sc[[u, u]] + sc.row(u).iter().map(|x| x.exp()).sum::<f64>().ln())
            .sum::<f64>()
            / 3.0;
        let (l, _) = info_nce(&sc);
        assert!((l - want).abs() < 1e-12);
        assert!(l >= 0.0 && 3f64.ln() - l <= 3f64.ln());
    }

    #[test]
    fn cosine_is_scale_invariant_in_r() {
        let h = array![[0.3, 0.4], [1.0, -1.0]];
        let r = array![[2.0, 0.0], [0.5, 0.5]];
        let a = cosine_scores(&h, &r);
        let b = cosine_scores(&h, &(&r * 7.5));
        assert!((&a - &b).iter().all(|x| x.abs() < 1e-12));
        // Zero rows are guarded instead of producing NaN.
        assert!(cosine_scores(&Array2::zeros((1, 2)), &r).iter().all(|x| x.is_finite()));
    }

    fn micro(seed: u64) -> (FairModel, PretrainedCF, MiBatch) {
        let dims = ModelDims { users: 4, items: 5, dim: 4, arity: 2, annotators: 2, embed_dim: 3 };
        let mut m = FairModel::new(dims, EmbeddingTables::init(4, 5, 4, 0.5, seed), 2.0, seed).unwrap();
        // Keep log-variances inside the clamp so finite differences are smooth.
        for l in &mut m.var.logvar.layers {
            l.weight.mapv_inplace(|w| w * 0.3);
        }
        let cf = PretrainedCF::freeze(EmbeddingTables::init(4, 5, 4, 0.5, seed + 100), 0, 0.0);
        let ds = InteractionDataset::from_pairs(4, 5, &[(0, 0), (1, 1), (2, 2), (3, 3), (0, 4)]).unwrap();
        let batch = MiBatch {
            bpr: sample_negatives(&ds, &ds.pairs(Split::Train), seed).unwrap(),
            users: vec![0, 1, 3],
            items: vec![0, 2, 4],
        };
        (m, cf, batch)
    }

    #[test]
    fn ub_gradients_match_finite_differences() {
        let (m, cf, batch) = micro(1);
        let _ = cf;
        // Gradients for the bound alone.
        let u_rows = gather_rows(&m.tables.users, &batch.users);
        let (p, cache) = m.pref.forward_cached(u_rows.view());
        let s = m.sens.forward(u_rows.view());
        let (_, dp) = loss_ub(&m.var, &s, &p).unwrap();
        let mut g = Gradients::new();
        let du = m.pref.backward(&cache, &dp, Some((&mut g, PREF)));
        g.add_rows(USERS, 4, &batch.users, &du, 1.0);
        // `s` is a stop-gradient input, so it stays fixed under perturbation.
        check_grads(&m, &g, |m| {
            let p = m.pref.forward(gather_rows(&m.tables.users, &batch.users).view());
            loss_ub(&m.var, &s, &p).unwrap().0
        });
    }

    #[test]
    fn lb_gradients_match_finite_differences() {
        let (m, cf, batch) = micro(2);
        let u_rows = gather_rows(&m.tables.users, &batch.users);
        let (p, cache) = m.pref.forward_cached(u_rows.view());
        let s = m.sens.forward(u_rows.view());
        let r = gather_rows(&cf.tables().users, &batch.users);
        let (_, dp) = loss_lb(&r, &s, &p, 0.1);
        let mut g = Gradients::new();
        let du = m.pref.backward(&cache, &dp, Some((&mut g, PREF)));
        g.add_rows(USERS, 4, &batch.users, &du, 1.0);
        check_grads(&m, &g, |m| {
            let p = m.pref.forward(gather_rows(&m.tables.users, &batch.users).view());
            loss_lb(&r, &s, &p, 0.1).0
        });
    }

    #[test]
    fn full_loss_b_gradients_match_finite_differences() {
        let (m, cf, batch) = micro(3);
        let mi = MiConfig { lambda_ub: 0.7, lambda_lb: 0.4, item_side_lb: true, ..Default::default() };
        let (_, mut g) = loss_b(&m, &cf, &batch, &mi).unwrap();
        assert!(g.names().all(|n| n.starts_with("tables.") || n.starts_with("pref.")));
        // User rows also feed the stop-gradient `s`; they are covered above.
        g.retain_prefixes(&["tables.items", "pref."]);
        check_grads(&m, &g, |m| loss_b(m, &cf, &batch, &mi).unwrap().0.total);
    }

    #[test]
    fn variational_gradients_match_finite_differences() {
        let mut r = rng::rng(4);
        let net = VariationalNet::new(3, &mut r);
        let s = Array2::from_shape_fn((4, 3), |_| r.random_range(-1.0..1.0));
        let p = Array2::from_shape_fn((4, 3), |_| r.random_range(-1.0..1.0));
        let (_, g) = variational_nll(&net, &s, &p);
        let h = 1e-6;
        let mut probe = net.clone();
        let mut names = Vec::new();
        crate::nn::Parameterized::visit_params(&mut probe, VAR, &mut |n, _| names.push(n.to_string()));
        for name in names {
            let analytic = g.get(&name).unwrap().to_vec();
            for (k, &a) in analytic.iter().enumerate() {
                let eval = |delta: f64| {
                    let mut n2 = net.clone();
                    crate::nn::Parameterized::visit_params(&mut n2, VAR, &mut |n, v| {
                        if n == name {
                            v[k] += delta;
                        }
                    });
                    variational_nll(&n2, &s, &p).0
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let err = (a - num).abs();
                assert!(err < 1e-4 * a.abs().max(num.abs()) || err < 1e-8, "{name}[{k}] {a} vs {num}");
            }
        }
    }

    #[test]
    fn first_variational_step_increases_likelihood() {
        let mut r = rng::rng(6);
        let mut net = VariationalNet::new(4, &mut r);
        let s = Array2::from_shape_fn((32, 4), |_| r.random_range(-1.0..1.0));
        let p = Array2::from_shape_fn((32, 4), |_| r.random_range(-1.0..1.0));
        let (before, g) = variational_nll(&net, &s, &p);
        Adam::with_lr(1e-4).step(&mut net, VAR, &g);
        assert!(variational_nll(&net, &s, &p).0 < before);
    }

    #[test]
    fn zero_weights_reduce_to_bpr() {
        let (m, cf, batch) = micro(13);
        let mi = MiConfig { lambda_ub: 0.0, lambda_lb: 0.0, ..Default::default() };
        let (l, _) = loss_b(&m, &cf, &batch, &mi).unwrap();
        assert_eq!(l.total, l.bpr);
        let on = MiConfig { lambda_ub: 0.01, lambda_lb: 0.1, ..Default::default() };
        let (l, _) = loss_b(&m, &cf, &batch, &on).unwrap();
        assert!((l.total - (l.bpr + 0.01 * l.ub + 0.1 * l.lb)).abs() < 1e-10);
    }
}
