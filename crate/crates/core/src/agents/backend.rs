//! Completion backends: a live HTTP endpoint, recorded replays and an offline
//! simulator driven by planted confusion matrices.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::verbalize::AttributeSchema;
use crate::data::GroundTruthLabels;
use crate::eval::quality::majority_vote;
use crate::io::{jsonl, sha256_bytes};
use crate::{rng, Error, Label, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendTag {
    Http,
    Scripted,
    Simulated,
}

impl BackendTag {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendTag::Http => "http",
            BackendTag::Scripted => "scripted",
            BackendTag::Simulated => "simulated",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_tokens: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self { temperature: 0.0, max_tokens: 512 }
    }
}

/// What a request is for. Text backends ignore it; the simulator answers from it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RequestContext {
    Personas { count: usize },
    Annotate { user: usize, annotator: usize },
    Summarize { user: usize, votes: Vec<Label> },
    Other,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompletionRequest {
    pub system: String,
    pub user: String,
    pub decode: DecodeParams,
    pub context: RequestContext,
}

impl CompletionRequest {
    /// Stable key of the prompt text, used for replay.
    pub fn key(&self) -> String {
        sha256_bytes(format!("{}\u{0}{}", self.system, self.user).as_bytes())
    }
}

pub trait CompletionBackend: Send + Sync {
    fn tag(&self) -> BackendTag;
    fn complete(&self, request: &CompletionRequest) -> Result<String>;
}

/// OpenAI-compatible chat-completions endpoint.
#[derive(Clone, Debug)]
pub struct HttpBackend {
    pub url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

pub const ENV_URL: &str = "BLINDREC_LLM_URL";
pub const ENV_MODEL: &str = "BLINDREC_LLM_MODEL";
pub const ENV_KEY: &str = "BLINDREC_LLM_API_KEY";

impl HttpBackend {
    /// Reads the endpoint, model and optional key from the environment.
    pub fn from_env() -> Result<Self> {
        let get = |k: &str| std::env::var(k).map_err(|_| Error::Config(format!("{k} is not set")));
        Ok(Self {
            url: get(ENV_URL)?,
            model: get(ENV_MODEL)?,
            api_key: std::env::var(ENV_KEY).ok().filter(|k| !k.is_empty()),
            timeout: Duration::from_secs(120),
        })
    }
}

pub(crate) fn post_json(url: &str, key: Option<&str>, timeout: Duration, body: &serde_json::Value) -> Result<serde_json::Value> {
    let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
    let mut req = agent.post(url);
    if let Some(k) = key {
        req = req.header("Authorization", &format!("Bearer {k}"));
    }
    let mut resp = req.send_json(body).map_err(|e| Error::Transport(format!("{url}: {e}")))?;
    resp.body_mut()
        .read_json::<serde_json::Value>()
        .map_err(|e| Error::Transport(format!("{url}: unreadable response: {e}")))
}

impl CompletionBackend for HttpBackend {
    fn tag(&self) -> BackendTag {
        BackendTag::Http
    }

    fn complete(&self, r: &CompletionRequest) -> Result<String> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": r.system},
                {"role": "user", "content": r.user},
            ],
            "temperature": r.decode.temperature,
            "max_tokens": r.decode.max_tokens,
        });
        let v = post_json(&self.url, self.api_key.as_deref(), self.timeout, &body)?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::Transport(format!("{}: response has no choices[0].message.content", self.url)))
    }
}

/// One recorded exchange. Entries without `key` are replayed in order for
/// any request whose key is not recorded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    pub response: String,
}

/// Replays responses, by prompt key first and then from a queue.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    keyed: HashMap<String, String>,
    queue: Mutex<VecDeque<String>>,
}

impl ScriptedBackend {
    pub fn from_entries(entries: Vec<ScriptEntry>) -> Self {
        let mut s = Self::default();
        for e in entries {
            match e.key {
                Some(k) => {
                    s.keyed.insert(k, e.response);
                }
                None => s.queue.get_mut().expect("fresh mutex").push_back(e.response),
            }
        }
        s
    }

    /// Responses served in order regardless of prompt.
    pub fn sequence<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        Self::from_entries(responses.into_iter().map(|r| ScriptEntry { key: None, response: r.into() }).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_entries(jsonl::read(path)?))
    }
}

impl CompletionBackend for ScriptedBackend {
    fn tag(&self) -> BackendTag {
        BackendTag::Scripted
    }

    fn complete(&self, r: &CompletionRequest) -> Result<String> {
        if let Some(resp) = self.keyed.get(&r.key()) {
            return Ok(resp.clone());
        }
        self.queue
            .lock()
            .map_err(|_| Error::Transport("scripted backend lock poisoned".into()))?
            .pop_front()
            .ok_or_else(|| Error::Transport(format!("no scripted response for prompt {}", &r.key()[..12])))
    }
}

/// Wraps a backend and keeps every exchange so it can be replayed later.
pub struct Recorder<B> {
    pub inner: B,
    log: Mutex<Vec<ScriptEntry>>,
}

impl<B: CompletionBackend> Recorder<B> {
    pub fn new(inner: B) -> Self {
        Self { inner, log: Mutex::new(Vec::new()) }
    }

    /// Recorded entries sorted by key, so concurrent runs save identical files.
    pub fn entries(&self) -> Vec<ScriptEntry> {
        let mut v = self.log.lock().expect("recorder lock").clone();
        v.sort_by(|a, b| a.key.cmp(&b.key));
        v.dedup_by(|a, b| a.key == b.key);
        v
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write(path, &self.entries())
    }
}

impl<B: CompletionBackend> CompletionBackend for Recorder<B> {
    fn tag(&self) -> BackendTag {
        self.inner.tag()
    }

    fn complete(&self, r: &CompletionRequest) -> Result<String> {
        let resp = self.inner.complete(r)?;
        self.log
            .lock()
            .map_err(|_| Error::Transport("recorder lock poisoned".into()))?
            .push(ScriptEntry { key: Some(r.key()), response: resp.clone() });
        Ok(resp)
    }
}

/// Checks shape and row sums of planted confusion matrices.
pub fn validate_confusions(confusions: &[Array2<f64>], arity: usize) -> Result<()> {
    if confusions.is_empty() {
        return Err(Error::invalid("at least one confusion matrix is required"));
    }
    for (i, f) in confusions.iter().enumerate() {
        if f.dim() != (arity, arity) {
            return Err(Error::invalid(format!("confusion {i} has shape {:?}, expected {arity}x{arity}", f.dim())));
        }
        for (j, row) in f.rows().into_iter().enumerate() {
            if row.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (row.sum() - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("confusion {i} row {j} is not a probability vector")));
            }
        }
    }
    Ok(())
}

/// Draws from a probability row by inverse CDF.
pub(crate) fn sample_row(row: ndarray::ArrayView1<f64>, seed: u64) -> usize {
    let x: f64 = rng::rng(seed).random();
    let mut acc = 0.0;
    for (k, &p) in row.iter().enumerate() {
        acc += p;
        if x < acc {
            return k;
        }
    }
    // Rounding left x above the final cumulative sum.
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// Seed of the draw for one `(user, annotator)` pair.
pub(crate) fn pair_seed(seed: u64, user: usize, annotator: usize) -> u64 {
    rng::mix(seed, &[user as u64, annotator as u64])
}

/// Deterministic verdict sentence naming a label.
pub fn verdict_text(schema: &AttributeSchema, label: usize) -> String {
    let name = schema.label_name(label).unwrap_or("unknown");
    format!("Based on the {} history, I infer that the user is likely {name}.", schema.item_kind)
}

const TRAITS: [&[&str]; 6] = [
    &["grew up in a coastal fishing town", "was raised in a dense industrial city", "spent childhood on a farm", "moved between three countries as a child", "comes from a large suburban family"],
    &["values tradition and routine", "questions most social conventions", "prizes loyalty to friends", "cares about fairness above all", "keeps strong religious customs"],
    &["follows online trends closely", "rarely reads the news", "is a heavy podcast listener", "reads film criticism weekly", "watches only what friends recommend"],
    &["is patient and analytical", "is impulsive and warm", "is reserved and observant", "is competitive and driven", "is playful and curious"],
    &["is in their early twenties", "is in their mid thirties", "is in their late forties", "is about sixty", "is past seventy"],
    &["works as a nurse", "is a software engineer", "teaches primary school", "runs a small bakery", "is a freight truck driver", "is a retired accountant"],
];

/// Offline backend answering from planted labels and per-annotator confusion
/// matrices. Every answer is a pure function of the request context and seed.
#[derive(Clone, Debug)]
pub struct SimulatedBackend {
    pub truth: GroundTruthLabels,
    pub confusions: Vec<Array2<f64>>,
    pub schema: AttributeSchema,
    pub seed: u64,
}

impl SimulatedBackend {
    pub fn new(truth: GroundTruthLabels, confusions: Vec<Array2<f64>>, schema: AttributeSchema, seed: u64) -> Result<Self> {
        schema.validate()?;
        if schema.arity() != truth.arity {
            return Err(Error::Config(format!("schema has {} labels but the attribute has {}", schema.arity(), truth.arity)));
        }
        validate_confusions(&confusions, truth.arity)?;
        Ok(Self { truth, confusions, schema, seed })
    }

    /// Label drawn for a pair, before any text is produced.
    pub fn draw(&self, user: usize, annotator: usize) -> Result<usize> {
        let f = self
            .confusions
            .get(annotator)
            .ok_or_else(|| Error::arg(format!("annotator {annotator} has no planted confusion")))?;
        let a = *self.truth.labels.get(user).ok_or_else(|| Error::arg(format!("user {user} has no planted label")))?;
        Ok(sample_row(f.row(a), pair_seed(self.seed, user, annotator)))
    }

    fn personas(&self, count: usize) -> String {
        let mut r = rng::named(self.seed, "personas");
        (1..=count)
            .map(|i| {
                let parts: Vec<&str> = TRAITS.iter().map(|pool| pool[r.random_range(0..pool.len())]).collect();
                format!("{i}. This person {}.", parts.join(", "))
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn summary(&self, votes: &[Label]) -> String {
        let counted = votes.iter().filter(|v| v.is_some()).count();
        match majority_vote(votes) {
            Some(l) => {
                let agree = votes.iter().filter(|v| **v == Some(l)).count();
                format!(
                    "{agree} of {counted} annotators point the same way. Weighing their arguments, I infer that the user is likely {}.",
                    self.schema.label_name(l).unwrap_or("unknown")
                )
            }
            None => format!("The {counted} usable annotator answers are split and the evidence stays inconclusive."),
        }
    }
}

impl CompletionBackend for SimulatedBackend {
    fn tag(&self) -> BackendTag {
        BackendTag::Simulated
    }

    fn complete(&self, r: &CompletionRequest) -> Result<String> {
        match &r.context {
            RequestContext::Personas { count } => Ok(self.personas(*count)),
            RequestContext::Annotate { user, annotator } => Ok(verdict_text(&self.schema, self.draw(*user, *annotator)?)),
            RequestContext::Summarize { votes, .. } => Ok(self.summary(votes)),
            RequestContext::Other => Err(Error::Transport("the simulated backend only answers pipeline requests".into())),
        }
    }
}

/// Offline backend with no access to labels: answers are a hash of the
/// prompt text, so they are deterministic but carry no signal.
#[derive(Clone, Debug)]
pub struct MockBackend {
    pub schema: AttributeSchema,
    pub seed: u64,
}

impl MockBackend {
    pub fn new(schema: AttributeSchema, seed: u64) -> Result<Self> {
        schema.validate()?;
        Ok(Self { schema, seed })
    }
}

impl CompletionBackend for MockBackend {
    fn tag(&self) -> BackendTag {
        BackendTag::Simulated
    }

    fn complete(&self, r: &CompletionRequest) -> Result<String> {
        let h = rng::mix(self.seed, &[rng::fnv1a(r.system.as_bytes()), rng::fnv1a(r.user.as_bytes())]);
        match &r.context {
            RequestContext::Personas { count } => {
                let truth = GroundTruthLabels { labels: vec![], arity: self.schema.arity(), visibility: crate::data::Visibility::Simulation };
                let sim = SimulatedBackend { truth, confusions: vec![], schema: self.schema.clone(), seed: self.seed };
                Ok(sim.personas(*count))
            }
            RequestContext::Annotate { .. } => Ok(verdict_text(&self.schema, (h % self.schema.arity() as u64) as usize)),
            RequestContext::Summarize { votes, .. } => {
                let truth = GroundTruthLabels { labels: vec![], arity: self.schema.arity(), visibility: crate::data::Visibility::Simulation };
                let sim = SimulatedBackend { truth, confusions: vec![], schema: self.schema.clone(), seed: self.seed };
                Ok(sim.summary(votes))
            }
            RequestContext::Other => Ok(format!("Mock answer {h:016x}.")),
        }
    }
}
