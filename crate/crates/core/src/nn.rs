//! Minimal dense layers with explicit backward passes, a named gradient store,
//! and an Adam optimizer that updates whatever parameters have gradients.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

/// Anything holding named `f64` parameter tensors.
pub trait Parameterized {
    /// Calls `f(name, values)` for every tensor, in a fixed order. Names are
    /// prefixed with `prefix` and a dot.
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Gradients keyed by fully-qualified parameter name, stored flat.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, Vec<f64>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `scale * g` into the slot for `name`, creating it if needed.
    pub fn add(&mut self, name: &str, g: &[f64], scale: f64) {
        let slot = self
            .map
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; g.len()]);
        assert_eq!(slot.len(), g.len(), "gradient shape mismatch for {name}");
        for (s, &x) in slot.iter_mut().zip(g) {
            *s += scale * x;
        }
    }

    pub fn add_array(&mut self, name: &str, g: &Array2<f64>, scale: f64) {
        let g = g.as_standard_layout();
        self.add(name, g.as_slice().unwrap(), scale);
    }

    /// Adds `rows` of `g` into rows `index` of a `(total_rows, dim)` tensor,
    /// accumulating repeated indices.
    pub fn add_rows(&mut self, name: &str, total_rows: usize, index: &[usize], g: &Array2<f64>, scale: f64) {
        let dim = g.ncols();
        let slot = self
            .map
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; total_rows * dim]);
        assert_eq!(slot.len(), total_rows * dim, "gradient shape mismatch for {name}");
        for (r, &row) in index.iter().enumerate() {
            let dst = &mut slot[row * dim..(row + 1) * dim];
            for (d, &x) in dst.iter_mut().zip(g.row(r)) {
                *d += scale * x;
            }
        }
    }

    /// `self += scale * other`.
    pub fn merge(&mut self, other: &Gradients, scale: f64) {
        for (name, g) in &other.map {
            self.add(name, g, scale);
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.map.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Drops every gradient whose name does not start with one of `prefixes`.
    pub fn retain_prefixes(&mut self, prefixes: &[&str]) {
        self.map.retain(|k, _| prefixes.iter().any(|p| k.starts_with(p)));
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

/// Fully connected layer `y = x W^T + b` over row-major batches.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `(out, in)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Uniform init in `±1/sqrt(fan_in)` for weights and bias.
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = Array2::from_shape_fn((output, input), |_| rng.random_range(-bound..bound));
        let bias = Array1::from_shape_fn(output, |_| rng.random_range(-bound..bound));
        Self { weight, bias }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Returns `dx`; writes `dW`, `db` under `prefix` when `grads` is given.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        dy: &Array2<f64>,
        grads: Option<(&mut Gradients, &str)>,
    ) -> Array2<f64> {
        if let Some((g, prefix)) = grads {
            g.add_array(&join(prefix, "weight"), &dy.t().dot(&x), 1.0);
            let db = dy.sum_axis(Axis(0));
            g.add(&join(prefix, "bias"), db.as_slice().unwrap(), 1.0);
        }
        dy.dot(&self.weight)
    }
}

impl Parameterized for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "weight"), self.weight.as_slice_mut().unwrap());
        f(&join(prefix, "bias"), self.bias.as_slice_mut().unwrap());
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Activations saved by [`Mlp::forward_cached`] for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`.
    pub fn new(dims: &[usize], rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        Self {
            layers: dims.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect(),
        }
    }

    pub fn from_layers(layers: Vec<Linear>) -> Self {
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = self.layers[0].forward(x);
        for layer in &self.layers[1..] {
            h.mapv_inplace(relu);
            h = layer.forward(h.view());
        }
        h
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(h.view());
            inputs.push(h);
            h = if i + 1 < self.layers.len() { z.mapv(relu) } else { z.clone() };
            pre.push(z);
        }
        (h, MlpCache { inputs, pre })
    }

    /// Backpropagates `dy`; parameter gradients go to `grads` under `prefix.{i}`
    /// when given, otherwise the network is treated as frozen.
    pub fn backward(
        &self,
        cache: &MlpCache,
        dy: &Array2<f64>,
        mut grads: Option<(&mut Gradients, &str)>,
    ) -> Array2<f64> {
        let mut d = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                d.zip_mut_with(&cache.pre[i], |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            let layer_grads = grads
                .as_mut()
                .map(|(g, prefix)| (&mut **g, join(prefix, &i.to_string())));
            d = match layer_grads {
                Some((g, name)) => self.layers[i].backward(cache.inputs[i].view(), &d, Some((g, &name))),
                None => self.layers[i].backward(cache.inputs[i].view(), &d, None),
            };
        }
        d
    }
}

impl Parameterized for Mlp {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params(&join(prefix, &i.to_string()), f);
        }
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Backward of row-wise softmax given the softmax output `p` and `dL/dp`.
pub fn softmax_rows_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(p.dim());
    for ((mut o, pr), dr) in out.rows_mut().into_iter().zip(p.rows()).zip(dp.rows()) {
        let dot = pr.dot(&dr);
        for ((o, &pi), &di) in o.iter_mut().zip(pr).zip(dr) {
            *o = pi * (di - dot);
        }
    }
    out
}

/// `ln Σ exp(x)` over a slice.
pub fn logsumexp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.into_iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Gathers rows `index` of `table` into a new `(index.len(), dim)` matrix.
pub fn gather_rows(table: &Array2<f64>, index: &[usize]) -> Array2<f64> {
    table.select(Axis(0), index)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with per-tensor state keyed by parameter name. Tensors without a
/// gradient in a given step are left untouched, which is how freezing works.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, state: HashMap::new() }
    }

    pub fn with_lr(lr: f64) -> Self {
        Self::new(AdamConfig { lr, ..Default::default() })
    }

    pub fn step<P: Parameterized + ?Sized>(&mut self, params: &mut P, prefix: &str, grads: &Gradients) {
        let cfg = self.config;
        let state = &mut self.state;
        params.visit_params(prefix, &mut |name, values| {
            let Some(g) = grads.get(name) else { return };
            assert_eq!(g.len(), values.len(), "gradient shape mismatch for {name}");
            let st = state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; values.len()],
                v: vec![0.0; values.len()],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - cfg.beta1.powi(st.t as i32);
            let bc2 = 1.0 - cfg.beta2.powi(st.t as i32);
            for ((x, &gi), (m, v)) in values
                .iter_mut()
                .zip(g)
                .zip(st.m.iter_mut().zip(st.v.iter_mut()))
            {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *x -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        });
    }
}

/// Flat copy of every parameter, for bit-level freeze checks.
pub fn snapshot<P: Parameterized + ?Sized>(params: &mut P, prefix: &str) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    params.visit_params(prefix, &mut |name, values| {
        out.insert(name.to_string(), values.to_vec());
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut r = rng::rng(3);
        let mut net = Mlp::new(&[4, 5, 3], &mut r);
        let x = Array2::from_shape_fn((3, 4), |_| r.random_range(-1.0..1.0));
        let w = Array2::from_shape_fn((3, 3), |_| r.random_range(-1.0..1.0));
        let loss = |net: &Mlp, x: &Array2<f64>| (net.forward(x.view()) * &w).sum();
        let (_, cache) = net.forward_cached(x.view());
        let mut g = Gradients::new();
        let dx = net.backward(&cache, &w, Some((&mut g, "net")));
        let h = 1e-6;
        let mut names = Vec::new();
        net.visit_params("net", &mut |n, _| names.push(n.to_string()));
        for name in names {
            let analytic = g.get(&name).unwrap().to_vec();
            for (k, &a) in analytic.iter().enumerate() {
                let mut plus = net.clone();
                plus.visit_params("net", &mut |n, v| if n == name { v[k] += h });
                let mut minus = net.clone();
                minus.visit_params("net", &mut |n, v| if n == name { v[k] -= h });
                let fd = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * h);
                assert!((fd - a).abs() < 1e-6 * (1.0 + fd.abs()), "{name}[{k}] {fd} vs {a}");
            }
        }
        for i in 0..3 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn adam_only_touches_parameters_with_gradients() {
        let mut r = rng::rng(1);
        let mut net = Mlp::new(&[2, 2, 2], &mut r);
        let before = snapshot(&mut net, "n");
        let mut g = Gradients::new();
        g.add("n.1.bias", &[1.0, -1.0], 1.0);
        Adam::with_lr(0.1).step(&mut net, "n", &g);
        let after = snapshot(&mut net, "n");
        assert_eq!(before["n.0.weight"], after["n.0.weight"]);
        assert_ne!(before["n.1.bias"], after["n.1.bias"]);
        // First Adam step moves each coordinate by lr in the gradient's sign.
        assert!((before["n.1.bias"][0] - after["n.1.bias"][0] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&array![[1.0, 2.0, 3.0], [1000.0, 0.0, -1000.0]]);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stable_scalar_functions() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus(-800.0) >= 0.0 && softplus(800.0) == 800.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!((logsumexp([0.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
