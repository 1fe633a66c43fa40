//! Text embedders.

use std::sync::LazyLock;
use std::time::Duration;

use rand::Rng as _;
use regex::Regex;

use super::backend::post_json;
use crate::{rng, Error, Result};

pub const DEFAULT_EMBED_DIM: usize = 768;

pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Validated call: rejects empty text and checks the returned width.
pub fn embed_text(embedder: &dyn TextEmbedder, text: &str) -> Result<Vec<f64>> {
    if text.trim().is_empty() {
        return Err(Error::arg("cannot embed empty text"));
    }
    let v = embedder.embed(text)?;
    if v.len() != embedder.dim() {
        return Err(Error::invalid(format!("embedder returned {} values, declared {}", v.len(), embedder.dim())));
    }
    Ok(v)
}

static TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[a-z0-9]+(?:'[a-z]+)?").expect("static regex"));

/// Offline embedder: each lowercase word maps to a seeded random ±1 vector,
/// the text is the count-weighted sum, normalized to unit length. Texts that
/// share words land close together.
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(Self { dim, seed })
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: DEFAULT_EMBED_DIM, seed: 0 }
    }
}

impl TextEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let lower = text.to_lowercase();
        let mut counts = std::collections::BTreeMap::<&str, f64>::new();
        for t in TOKEN.find_iter(&lower) {
            *counts.entry(t.as_str()).or_default() += 1.0;
        }
        let trimmed = lower.trim();
        if counts.is_empty() && !trimmed.is_empty() {
            counts.insert(trimmed, 1.0);
        }
        let mut v = vec![0.0; self.dim];
        for (tok, c) in counts {
            let mut r = rng::rng(rng::mix(self.seed, &[rng::fnv1a(tok.as_bytes())]));
            for x in &mut v {
                *x += if r.random::<bool>() { c } else { -c };
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

/// OpenAI-compatible `/embeddings` endpoint.
#[derive(Clone, Debug)]
pub struct HttpEmbedder {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub dim: usize,
    pub timeout: Duration,
}

pub const ENV_EMBED_URL: &str = "BLINDREC_EMBED_URL";
pub const ENV_EMBED_MODEL: &str = "BLINDREC_EMBED_MODEL";
pub const ENV_EMBED_KEY: &str = "BLINDREC_EMBED_API_KEY";

impl HttpEmbedder {
    pub fn from_env(dim: usize) -> Result<Self> {
        let get = |k: &str| std::env::var(k).map_err(|_| Error::Config(format!("{k} is not set")));
        Ok(Self {
            url: get(ENV_EMBED_URL)?,
            model: get(ENV_EMBED_MODEL)?,
            api_key: std::env::var(ENV_EMBED_KEY).ok().filter(|k| !k.is_empty()),
            dim,
            timeout: Duration::from_secs(60),
        })
    }
}

impl TextEmbedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let body = serde_json::json!({"model": self.model, "input": text});
        let v = post_json(&self.url, self.api_key.as_deref(), self.timeout, &body)?;
        let arr = v
            .pointer("/data/0/embedding")
            .and_then(|e| e.as_array())
            .ok_or_else(|| Error::Transport(format!("{}: response has no data[0].embedding", self.url)))?;
        arr.iter()
            .map(|x| x.as_f64().ok_or_else(|| Error::Transport("non-numeric embedding value".into())))
            .collect()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}
