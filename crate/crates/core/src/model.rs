//! Complete trainable state of the two-stage model.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::encoders::EmbeddingTables;
use crate::nn::{softmax_rows, Linear, Mlp, MlpCache, Parameterized};
use crate::rng;
use crate::{Error, Result};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Shapes needed to rebuild a [`FairModel`] before loading weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub users: usize,
    pub items: usize,
    pub dim: usize,
    /// Number of sensitive classes.
    pub arity: usize,
    pub annotators: usize,
    /// Width of rationale text embeddings.
    pub embed_dim: usize,
}

/// Per-annotator confusion logits; the realized matrix is their row softmax.
/// Entry `(j, k)` of the realized matrix is the chance of reporting `k` when
/// the true class is `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionParams {
    pub logits: Vec<Array2<f64>>,
}

impl ConfusionParams {
    /// `gamma * I` for every annotator.
    pub fn diagonal(annotators: usize, arity: usize, gamma: f64) -> Self {
        Self {
            logits: (0..annotators).map(|_| Array2::eye(arity) * gamma).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn realized(&self, i: usize) -> Array2<f64> {
        softmax_rows(&self.logits[i])
    }

    pub fn realized_all(&self) -> Vec<Array2<f64>> {
        (0..self.len()).map(|i| self.realized(i)).collect()
    }
}

impl Parameterized for ConfusionParams {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, z) in self.logits.iter_mut().enumerate() {
            f(&format!("{prefix}.{i}"), z.as_slice_mut().unwrap());
        }
    }
}

/// Bias-free linear map from text-embedding space to the latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `(dim, embed_dim)`
    pub weight: Array2<f64>,
}

impl Projection {
    pub fn new(embed_dim: usize, dim: usize, r: &mut rng::Rng) -> Self {
        Self { weight: Linear::new(embed_dim, dim, r).weight }
    }

    pub fn forward(&self, e: ArrayView2<f64>) -> Array2<f64> {
        e.dot(&self.weight.t())
    }
}

impl Parameterized for Projection {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.weight"), self.weight.as_slice_mut().unwrap());
    }
}

/// Diagonal-Gaussian conditional `q(s | p)` with separate mean and log-variance heads.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalNet {
    pub mu: Mlp,
    pub logvar: Mlp,
}

/// Forward results of [`VariationalNet`] kept for backpropagation.
pub struct VariationalOut {
    pub mu: Array2<f64>,
    /// Clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub logvar: Array2<f64>,
    /// Pre-clamp values, to zero the gradient where the clamp is active.
    pub logvar_raw: Array2<f64>,
    pub mu_cache: MlpCache,
    pub logvar_cache: MlpCache,
}

impl VariationalNet {
    pub fn new(dim: usize, r: &mut rng::Rng) -> Self {
        Self::with_hidden(dim, dim, r)
    }

    /// Two-layer heads with a custom hidden width.
    pub fn with_hidden(dim: usize, hidden: usize, r: &mut rng::Rng) -> Self {
        Self {
            mu: Mlp::new(&[dim, hidden, dim], r),
            logvar: Mlp::new(&[dim, hidden, dim], r),
        }
    }

    pub fn forward(&self, p: ArrayView2<f64>) -> VariationalOut {
        let (mu, mu_cache) = self.mu.forward_cached(p);
        let (logvar_raw, logvar_cache) = self.logvar.forward_cached(p);
        let logvar = logvar_raw.mapv(|x| x.clamp(LOGVAR_MIN, LOGVAR_MAX));
        VariationalOut { mu, logvar, logvar_raw, mu_cache, logvar_cache }
    }

    /// Backward from `d_mu`, `d_logvar` (w.r.t. the clamped values). Returns
    /// `dL/dp`. Parameter gradients go under `prefix.mu.*` / `prefix.logvar.*`
    /// when `grads` is given.
    pub fn backward(
        &self,
        out: &VariationalOut,
        d_mu: &Array2<f64>,
        d_logvar: &Array2<f64>,
        grads: Option<(&mut crate::nn::Gradients, &str)>,
    ) -> Array2<f64> {
        let mut d_lv = d_logvar.clone();
        d_lv.zip_mut_with(&out.logvar_raw, |g, &raw| {
            if !(LOGVAR_MIN..=LOGVAR_MAX).contains(&raw) {
                *g = 0.0;
            }
        });
        match grads {
            Some((g, prefix)) => {
                let a = self.mu.backward(&out.mu_cache, d_mu, Some((g, &format!("{prefix}.mu"))));
                let b = self.logvar.backward(&out.logvar_cache, &d_lv, Some((g, &format!("{prefix}.logvar"))));
                a + b
            }
            None => self.mu.backward(&out.mu_cache, d_mu, None) + self.logvar.backward(&out.logvar_cache, &d_lv, None),
        }
    }
}

impl Parameterized for VariationalNet {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.mu.visit_params(&format!("{prefix}.mu"), f);
        self.logvar.visit_params(&format!("{prefix}.logvar"), f);
    }
}

/// Embedding tables plus every network of both stages.
///
/// Parameter names: `tables.users`, `tables.items`, `sens.*`, `cls.*`,
/// `confusion.{i}`, `proj.weight`, `pref.*`, `var.mu.*`, `var.logvar.*`.
#[derive(Clone, Debug, PartialEq)]
pub struct FairModel {
    pub dims: ModelDims,
    pub tables: EmbeddingTables,
    /// Sensitive encoder `d -> d -> d`.
    pub sens: Mlp,
    /// Class-probability head `d -> d -> |A|` (softmax applied outside).
    pub cls: Mlp,
    pub confusion: ConfusionParams,
    pub proj: Projection,
    /// Preference encoder `d -> d -> d`.
    pub pref: Mlp,
    pub var: VariationalNet,
}

pub const SENS: &str = "sens";
pub const CLS: &str = "cls";
pub const CONFUSION: &str = "confusion";
pub const PROJ: &str = "proj";
pub const PREF: &str = "pref";
pub const VAR: &str = "var";

impl FairModel {
    /// Fresh networks around existing tables. Every component draws from its
    /// own named stream so adding one never perturbs the others.
    pub fn new(dims: ModelDims, tables: EmbeddingTables, confusion_init: f64, seed: u64) -> Result<Self> {
        if tables.users.dim() != (dims.users, dims.dim) || tables.items.dim() != (dims.items, dims.dim) {
            return Err(Error::arg("embedding tables do not match the model dimensions"));
        }
        if dims.arity < 2 {
            return Err(Error::arg("attribute arity must be at least 2"));
        }
        let d = dims.dim;
        Ok(Self {
            tables,
            sens: Mlp::new(&[d, d, d], &mut rng::named(seed, SENS)),
            cls: Mlp::new(&[d, d, dims.arity], &mut rng::named(seed, CLS)),
            confusion: ConfusionParams::diagonal(dims.annotators, dims.arity, confusion_init),
            proj: Projection::new(dims.embed_dim, d, &mut rng::named(seed, PROJ)),
            pref: Mlp::new(&[d, d, d], &mut rng::named(seed, PREF)),
            var: VariationalNet::new(d, &mut rng::named(seed, VAR)),
            dims,
        })
    }

    /// `s_u` for every user.
    pub fn sensitive_embeddings(&self) -> Array2<f64> {
        self.sens.forward(self.tables.users.view())
    }

    /// Classifier output `q(a | s_u)` for every user.
    pub fn class_probs(&self) -> Array2<f64> {
        softmax_rows(&self.cls.forward(self.sensitive_embeddings().view()))
    }

    /// `p_u` for every user: the sensitive-blind representation.
    pub fn fair_embeddings(&self) -> Array2<f64> {
        self.pref.forward(self.tables.users.view())
    }

    /// Shape of every named tensor, in visiting order.
    pub fn tensor_shapes(&self) -> Vec<(String, (usize, usize))> {
        let mut out = vec![
            ("tables.users".to_string(), self.tables.users.dim()),
            ("tables.items".to_string(), self.tables.items.dim()),
        ];
        let mlp = |out: &mut Vec<(String, (usize, usize))>, prefix: &str, net: &Mlp| {
            for (i, l) in net.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), l.weight.dim()));
                out.push((format!("{prefix}.{i}.bias"), (1, l.bias.len())));
            }
        };
        mlp(&mut out, SENS, &self.sens);
        mlp(&mut out, CLS, &self.cls);
        for (i, z) in self.confusion.logits.iter().enumerate() {
            out.push((format!("{CONFUSION}.{i}"), z.dim()));
        }
        out.push((format!("{PROJ}.weight"), self.proj.weight.dim()));
        mlp(&mut out, PREF, &self.pref);
        mlp(&mut out, &format!("{VAR}.mu"), &self.var.mu);
        mlp(&mut out, &format!("{VAR}.logvar"), &self.var.logvar);
        out
    }
}

impl Parameterized for FairModel {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        let p = |name: &str| if prefix.is_empty() { name.to_string() } else { format!("{prefix}.{name}") };
        self.tables.visit_params(prefix, f);
        self.sens.visit_params(&p(SENS), f);
        self.cls.visit_params(&p(CLS), f);
        self.confusion.visit_params(&p(CONFUSION), f);
        self.proj.visit_params(&p(PROJ), f);
        self.pref.visit_params(&p(PREF), f);
        self.var.visit_params(&p(VAR), f);
    }
}

fn encode(net: &Mlp, row: ArrayView1<f64>) -> Result<Array1<f64>> {
    if row.len() != net.input_dim() {
        return Err(Error::arg(format!(
            "input has dimension {}, encoder expects {}",
            row.len(),
            net.input_dim()
        )));
    }
    let x = row.to_owned().insert_axis(ndarray::Axis(0));
    Ok(net.forward(x.view()).row(0).to_owned())
}

/// `s_u = S(u)` for a single row.
pub fn encode_sensitive(net: &Mlp, u: ArrayView1<f64>) -> Result<Array1<f64>> {
    encode(net, u)
}

/// `p_u = P(u)` for a single row.
pub fn encode_preference(net: &Mlp, u: ArrayView1<f64>) -> Result<Array1<f64>> {
    encode(net, u)
}
