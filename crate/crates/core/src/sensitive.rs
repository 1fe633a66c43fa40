//! Stage 1: a sensitive-aware user representation learned from noisy
//! annotator labels through per-annotator confusion matrices, regularized by
//! persona similarity and aligned with rationale embeddings.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::TrainingConfig;
use crate::encoders::{bpr_loss, epoch_batches, sample_negatives, batch_seed, BprBatch, USERS};
use crate::model::{FairModel, CLS, CONFUSION, PROJ, SENS};
use crate::nn::{gather_rows, logsumexp, softmax_rows, softmax_rows_backward, Adam, Gradients};
use crate::rng;
use crate::{Error, Label, Result};

const SIMPLEX_TOL: f64 = 1e-6;

/// Verbalized labels indexed `[user][annotator]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationMatrix {
    pub annotators: usize,
    pub labels: Vec<Vec<Label>>,
}

impl AnnotationMatrix {
    pub fn new(annotators: usize, labels: Vec<Vec<Label>>) -> Result<Self> {
        if let Some((u, row)) = labels.iter().enumerate().find(|(_, r)| r.len() != annotators) {
            return Err(Error::invalid(format!(
                "user {u} has {} annotations, expected {annotators}",
                row.len()
            )));
        }
        Ok(Self { annotators, labels })
    }

    pub fn user_count(&self) -> usize {
        self.labels.len()
    }

    /// Users with at least one non-abstaining label.
    pub fn labeled_users(&self) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&u| self.labels[u].iter().any(Option::is_some))
            .collect()
    }
}

/// `q(ã = k | s) = Σ_j F[j, k] c_j`: the class distribution pushed through an
/// annotator's confusion matrix.
pub fn predicted_annotator_dist(f: &Array2<f64>, class_probs: ArrayView1<f64>) -> Result<Array1<f64>> {
    let a = class_probs.len();
    if f.dim() != (a, a) {
        return Err(Error::arg(format!("confusion matrix {:?} does not match {a} classes", f.dim())));
    }
    if class_probs.iter().any(|&c| c < -SIMPLEX_TOL) || (class_probs.sum() - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Validation("class probabilities are not on the simplex".into()));
    }
    for row in f.rows() {
        if row.iter().any(|&x| x < -SIMPLEX_TOL) || (row.sum() - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Validation("confusion matrix is not row-stochastic".into()));
        }
    }
    Ok(f.t().dot(&class_probs))
}

/// Value and gradients of the annotator likelihood term for given class
/// probabilities `c` (`B x |A|`) and realized confusions.
#[derive(Clone, Debug)]
pub struct ClsTerms {
    pub loss: f64,
    pub pairs: usize,
    pub d_class_probs: Array2<f64>,
    pub d_confusion: Vec<Array2<f64>>,
}

/// Mean over non-abstaining `(user, annotator)` pairs of `-ln q(ã | s)`.
pub fn cls_terms(c: &Array2<f64>, confusions: &[Array2<f64>], labels: &[&[Label]]) -> Result<ClsTerms> {
    let (b, a) = c.dim();
    if labels.len() != b {
        return Err(Error::arg("one label row per batch user is required"));
    }
    let pairs: usize = labels.iter().map(|r| r.iter().flatten().count()).sum();
    if pairs == 0 {
        return Err(Error::EmptyBatch("every annotation in the batch abstains".into()));
    }
    let scale = 1.0 / pairs as f64;
    let mut loss = 0.0;
    let mut dc = Array2::zeros((b, a));
    let mut df: Vec<Array2<f64>> = confusions.iter().map(|f| Array2::zeros(f.dim())).collect();
    for (u, row) in labels.iter().enumerate() {
        if row.len() != confusions.len() {
            return Err(Error::arg("annotation row length differs from the annotator count"));
        }
        for (i, label) in row.iter().enumerate() {
            let Some(k) = *label else { continue };
            if k >= a {
                return Err(Error::arg(format!("label {k} outside {a} classes")));
            }
            let f = &confusions[i];
            let q: f64 = (0..a).map(|j| f[[j, k]] * c[[u, j]]).sum();
            loss -= q.ln() * scale;
            let g = -scale / q;
            for j in 0..a {
                dc[[u, j]] += g * f[[j, k]];
                df[i][[j, k]] += g * c[[u, j]];
            }
        }
    }
    Ok(ClsTerms { loss, pairs, d_class_probs: dc, d_confusion: df })
}

/// Annotator-likelihood loss on `users` with gradients for the tables,
/// sensitive encoder, classifier and confusion logits.
pub fn loss_cls(model: &FairModel, annotations: &AnnotationMatrix, users: &[usize]) -> Result<(f64, Gradients)> {
    let u_rows = gather_rows(&model.tables.users, users);
    let (s, s_cache) = model.sens.forward_cached(u_rows.view());
    let (logits, c_cache) = model.cls.forward_cached(s.view());
    let c = softmax_rows(&logits);
    let confusions = model.confusion.realized_all();
    let labels: Vec<&[Label]> = users.iter().map(|&u| annotations.labels[u].as_slice()).collect();
    let terms = cls_terms(&c, &confusions, &labels)?;

    let mut g = Gradients::new();
    for (i, (f, df)) in confusions.iter().zip(&terms.d_confusion).enumerate() {
        g.add_array(&format!("{CONFUSION}.{i}"), &softmax_rows_backward(f, df), 1.0);
    }
    let d_logits = softmax_rows_backward(&c, &terms.d_class_probs);
    let ds = model.cls.backward(&c_cache, &d_logits, Some((&mut g, CLS)));
    let du = model.sens.backward(&s_cache, &ds, Some((&mut g, SENS)));
    g.add_rows(USERS, model.dims.users, users, &du, 1.0);
    Ok((terms.loss, g))
}

/// Mean annotator negative log-likelihood over every labeled user (no gradients).
pub fn annotator_fit(model: &FairModel, annotations: &AnnotationMatrix) -> Result<f64> {
    annotator_fit_on(model, annotations, &annotations.labeled_users())
}

/// [`annotator_fit`] restricted to `users`.
pub fn annotator_fit_on(model: &FairModel, annotations: &AnnotationMatrix, users: &[usize]) -> Result<f64> {
    let c = softmax_rows(&model.cls.forward(model.sens.forward(gather_rows(&model.tables.users, users).view()).view()));
    let labels: Vec<&[Label]> = users.iter().map(|&u| annotations.labels[u].as_slice()).collect();
    Ok(cls_terms(&c, &model.confusion.realized_all(), &labels)?.loss)
}

/// Persona neighbourhoods: `Γ(i)` holds every other persona no farther than
/// the `k`-th nearest one, so ties at that distance are all included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusGraph {
    pub k: usize,
    pub neighbors: Vec<Vec<usize>>,
    pub distances: Vec<Vec<f64>>,
}

impl ConsensusGraph {
    /// Directed edges `(i, j)` with `j ∈ Γ(i)`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, ns)| ns.iter().map(move |&j| (i, j)))
    }

    /// No edges: disables the consensus term.
    pub fn empty(annotators: usize) -> Self {
        Self { k: 0, neighbors: vec![Vec::new(); annotators], distances: vec![vec![0.0; annotators]; annotators] }
    }
}

pub fn consensus_neighbors(persona_embeddings: &Array2<f64>, k: usize) -> Result<ConsensusGraph> {
    let n = persona_embeddings.nrows();
    if k == 0 || k >= n {
        return Err(Error::arg(format!("K = {k} must be in 1..{n}")));
    }
    let distances: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let diff = &persona_embeddings.row(i) - &persona_embeddings.row(j);
                    diff.dot(&diff).sqrt()
                })
                .collect()
        })
        .collect();
    let neighbors = (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| distances[i][a].total_cmp(&distances[i][b]).then(a.cmp(&b)));
            let radius = distances[i][others[k - 1]];
            others.into_iter().filter(|&j| distances[i][j] <= radius).collect()
        })
        .collect();
    Ok(ConsensusGraph { k, neighbors, distances })
}

/// Sum over directed neighbour edges of `‖F_i − F_j‖_F`, differentiated
/// through the row softmax.
pub fn loss_sim(confusion: &crate::model::ConfusionParams, graph: &ConsensusGraph) -> (f64, Gradients) {
    let f = confusion.realized_all();
    let mut df: Vec<Array2<f64>> = f.iter().map(|m| Array2::zeros(m.dim())).collect();
    let mut loss = 0.0;
    for (i, j) in graph.edges() {
        let diff = &f[i] - &f[j];
        let norm = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
        loss += norm;
        if norm > 0.0 {
            df[i].scaled_add(1.0 / norm, &diff);
            df[j].scaled_add(-1.0 / norm, &diff);
        }
    }
    let mut g = Gradients::new();
    for (i, (fi, dfi)) in f.iter().zip(&df).enumerate() {
        g.add_array(&format!("{CONFUSION}.{i}"), &softmax_rows_backward(fi, dfi), 1.0);
    }
    (loss, g)
}

/// In-batch contrastive loss matching each rationale `e_u` to its own `s_u`
/// among the batch: mean of `-s_u·e_u + ln Σ_j exp(s_j·e_u)`.
/// Returns `(loss, dL/ds, dL/de)`.
pub fn fine_terms(s: &Array2<f64>, e: &Array2<f64>) -> (f64, Array2<f64>, Array2<f64>) {
    let b = s.nrows();
    let scores = e.dot(&s.t()); // [u, j] = s_j · e_u
    let mut ds = Array2::zeros(s.dim());
    let mut de = Array2::zeros(e.dim());
    let mut loss = 0.0;
    for u in 0..b {
        let row = scores.row(u);
        let lse = logsumexp(row.iter().copied());
        loss += lse - row[u];
        for j in 0..b {
            let w = ((row[j] - lse).exp() - if j == u { 1.0 } else { 0.0 }) / b as f64;
            ds.row_mut(j).scaled_add(w, &e.row(u));
            de.row_mut(u).scaled_add(w, &s.row(j));
        }
    }
    (loss / b as f64, ds, de)
}

/// Rationale-contrastive loss on `users` with gradients for the tables,
/// sensitive encoder and projection. `rationales` holds raw text embeddings
/// for every user.
pub fn loss_fine(model: &FairModel, rationales: &Array2<f64>, users: &[usize]) -> Result<(f64, Gradients)> {
    if rationales.ncols() != model.dims.embed_dim || rationales.nrows() != model.dims.users {
        return Err(Error::arg("rationale embeddings do not match the model"));
    }
    if users.len() < 2 {
        log::warn!("rationale contrast on a batch of {} user(s) is degenerate", users.len());
    }
    let u_rows = gather_rows(&model.tables.users, users);
    let (s, s_cache) = model.sens.forward_cached(u_rows.view());
    let raw = gather_rows(rationales, users);
    let e = model.proj.forward(raw.view());
    let (loss, ds, de) = fine_terms(&s, &e);
    let mut g = Gradients::new();
    g.add_array(&format!("{PROJ}.weight"), &de.t().dot(&raw), 1.0);
    let du = model.sens.backward(&s_cache, &ds, Some((&mut g, SENS)));
    g.add_rows(USERS, model.dims.users, users, &du, 1.0);
    Ok((loss, g))
}

/// Everything stage 1 consumes besides the interaction data.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Inputs<'a> {
    pub annotations: &'a AnnotationMatrix,
    /// Raw rationale embeddings, one row per user. `None` drops the term.
    pub rationales: Option<&'a Array2<f64>>,
    pub graph: &'a ConsensusGraph,
}

/// Components of the stage-1 objective for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SenLoss {
    pub total: f64,
    pub bpr: f64,
    pub cls: f64,
    pub sim: f64,
    pub fine: f64,
}

/// Sensitive part of the objective: `L_cls + λ_sim L_sim + λ_fine L_fine`.
pub fn sensitive_objective(
    model: &FairModel,
    inputs: &Stage1Inputs,
    users: &[usize],
    lambda_sim: f64,
    lambda_fine: f64,
) -> Result<(SenLoss, Gradients)> {
    let (cls, mut g) = loss_cls(model, inputs.annotations, users)?;
    let mut out = SenLoss { cls, ..Default::default() };
    if lambda_sim > 0.0 {
        let (sim, gs) = loss_sim(&model.confusion, inputs.graph);
        g.merge(&gs, lambda_sim);
        out.sim = sim;
    }
    if let (true, Some(r)) = (lambda_fine > 0.0, inputs.rationales) {
        let (fine, gf) = loss_fine(model, r, users)?;
        g.merge(&gf, lambda_fine);
        out.fine = fine;
    }
    out.total = out.cls + lambda_sim * out.sim + lambda_fine * out.fine;
    Ok((out, g))
}

/// Full composite `L_cls + L_bpr + λ_sim L_sim + λ_fine L_fine` on one BPR
/// batch and one sensitive batch.
pub fn loss_sen(
    model: &FairModel,
    bpr: &BprBatch,
    inputs: &Stage1Inputs,
    users: &[usize],
    lambda_sim: f64,
    lambda_fine: f64,
) -> Result<(SenLoss, Gradients)> {
    let (mut out, mut g) = sensitive_objective(model, inputs, users, lambda_sim, lambda_fine)?;
    let (b, gb) = bpr_loss(&model.tables, bpr)?;
    g.merge(&gb, 1.0);
    out.bpr = b;
    out.total += b;
    Ok((out, g))
}

/// Per-epoch stage-1 record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Log {
    pub epoch: usize,
    pub bpr: f64,
    pub sensitive: f64,
    pub annotator_fit: f64,
}

/// Alternates one BPR step and one sensitive step until `stage1_epochs` or
/// until the annotator fit of held-out users stops improving by
/// `stage1_min_delta` (relative) for `patience` epochs. The sensitive step
/// touches the tables only when `stage1_table_grads` is set.
pub fn train_stage1(
    model: &mut FairModel,
    ds: &crate::data::InteractionDataset,
    inputs: &Stage1Inputs,
    config: &TrainingConfig,
    seed: u64,
) -> Result<Vec<Stage1Log>> {
    config.validate()?;
    if inputs.annotations.user_count() != model.dims.users {
        return Err(Error::arg("annotations do not cover every user"));
    }
    if inputs.annotations.annotators != model.confusion.len() {
        return Err(Error::arg("annotator count differs from the confusion parameters"));
    }
    let mut labeled = inputs.annotations.labeled_users();
    if labeled.is_empty() {
        return Err(Error::EmptyBatch("no user has a non-abstaining annotation".into()));
    }
    // Held-out users drive early stopping; their rows never see the sensitive loss.
    labeled.shuffle(&mut rng::named(seed, "stage1-holdout"));
    let n_val = (config.stage1_val_fraction * labeled.len() as f64).floor() as usize;
    let val: Vec<usize> = if n_val >= 1 && n_val < labeled.len() { labeled.split_off(labeled.len() - n_val) } else { Vec::new() };
    labeled.sort_unstable();
    let monitor = if val.is_empty() { labeled.clone() } else { val };
    let neg_seed = rng::sub_seed(seed, "stage1-negatives");
    let order_seed = rng::sub_seed(seed, "stage1-order");
    let mut adam = Adam::with_lr(config.lr);
    let mut logs = Vec::new();
    let mut best_fit = f64::INFINITY;
    let mut stale = 0;
    let mut step = 0usize;
    for epoch in 0..config.stage1_epochs {
        let bpr_batches = epoch_batches(ds, config.bpr_batch, neg_seed, epoch);
        let mut order = labeled.clone();
        order.shuffle(&mut rng::rng(rng::mix(order_seed, &[epoch as u64])));
        let sens_batches: Vec<&[usize]> = order.chunks(config.sens_batch).collect();
        let steps = bpr_batches.len().max(sens_batches.len());
        let (mut bpr_total, mut sens_total) = (0.0, 0.0);
        for i in 0..steps {
            if !bpr_batches.is_empty() {
                let pairs = &bpr_batches[i % bpr_batches.len()];
                let batch = sample_negatives(ds, pairs, batch_seed(neg_seed, epoch, i))?;
                let (loss, g) = bpr_loss(&model.tables, &batch)?;
                if !loss.is_finite() || !g.all_finite() {
                    return Err(Error::Training { stage: "stage1", step, loss });
                }
                adam.step(model, "", &g);
                bpr_total += loss;
            }
            let users = sens_batches[i % sens_batches.len()];
            let (loss, mut g) = sensitive_objective(model, inputs, users, config.lambda_sim, config.lambda_fine)?;
            if !config.stage1_table_grads {
                g.retain_prefixes(&[SENS, CLS, CONFUSION, PROJ]);
            }
            if !loss.total.is_finite() || !g.all_finite() {
                return Err(Error::Training { stage: "stage1", step, loss: loss.total });
            }
            adam.step(model, "", &g);
            sens_total += loss.total;
            step += 1;
        }
        let fit = annotator_fit_on(model, inputs.annotations, &monitor)?;
        log::debug!("stage1 epoch {epoch}: held-out annotator fit {fit:.5}");
        logs.push(Stage1Log {
            epoch,
            bpr: bpr_total / steps as f64,
            sensitive: sens_total / steps as f64,
            annotator_fit: fit,
        });
        if !best_fit.is_finite() || best_fit - fit > config.stage1_min_delta * best_fit.abs() {
            best_fit = fit;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok(logs)
}

/// `|A| x |A|` matrix as CSV rows.
pub fn confusion_csv(f: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in f.axis_iter(Axis(0)) {
        let cells: Vec<String> = row.iter().map(|x| format!("{x:.6}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}
