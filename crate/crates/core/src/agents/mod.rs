//! Annotator agents: personas, per-persona attribute guesses, verbalization,
//! rationale summaries and text embeddings.

pub mod backend;
pub mod embed;
pub mod templates;
pub mod verbalize;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{LazyLock, Mutex};

use ndarray::Array2;
use regex::Regex;
use serde::{Deserialize, Serialize};

pub use backend::{
    BackendTag, CompletionBackend, CompletionRequest, DecodeParams, HttpBackend, MockBackend, Recorder, RequestContext,
    ScriptEntry, ScriptedBackend, SimulatedBackend,
};
pub use embed::{embed_text, HashEmbedder, HttpEmbedder, TextEmbedder, DEFAULT_EMBED_DIM};
pub use templates::{render, Templates};
pub use verbalize::{verbalize, AttributeSchema, LabelKeywords};

use crate::data::{GroundTruthLabels, InteractionDataset, Split};
use crate::sensitive::AnnotationMatrix;
use crate::{Error, Label, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonaProfile {
    pub persona_id: usize,
    pub description: String,
    /// Filled by [`embed_personas`]; stored separately from the JSONL file.
    #[serde(skip)]
    pub embedding: Vec<f64>,
}

/// One annotator's answer for one user.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub user: usize,
    pub annotator: usize,
    pub raw_text: String,
    pub label: Label,
    pub abstained: bool,
    pub backend: BackendTag,
}

impl AnnotationRecord {
    pub fn new(user: usize, annotator: usize, raw_text: String, label: Label, backend: BackendTag) -> Self {
        Self { user, annotator, raw_text, abstained: label.is_none(), label, backend }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RationaleSummary {
    pub user: usize,
    pub summary: String,
    pub final_label: Label,
    #[serde(skip)]
    pub embedding: Vec<f64>,
}

/// Settings shared by every agent call.
#[derive(Clone, Debug)]
pub struct AgentContext {
    pub templates: Templates,
    pub schema: AttributeSchema,
    pub decode: DecodeParams,
}

impl AgentContext {
    pub fn new(schema: AttributeSchema) -> Result<Self> {
        schema.validate()?;
        Ok(Self { templates: Templates::default(), schema, decode: DecodeParams::default() })
    }

    fn slots<'a>(&'a self, extra: &[(&'a str, &'a str)]) -> Vec<(&'a str, &'a str)> {
        let mut v = vec![("attribute", self.schema.attribute.as_str()), ("item_kind", self.schema.item_kind.as_str())];
        v.extend_from_slice(extra);
        v
    }
}

static ITEM_MARK: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?im)^[\s>#*_-]*(?:(?:persona|person|individual|profile)\s*)?(?:#\s*)?\d{1,3}\s*[.):]\**").expect("static regex")
});

/// Splits a numbered list into its items; text before the first marker is dropped.
pub fn parse_numbered_blocks(text: &str) -> Vec<String> {
    let starts: Vec<(usize, usize)> = ITEM_MARK.find_iter(text).map(|m| (m.start(), m.end())).collect();
    starts
        .iter()
        .enumerate()
        .map(|(i, &(_, body))| {
            let end = starts.get(i + 1).map_or(text.len(), |s| s.0);
            text[body..end].trim().to_string()
        })
        .filter(|s| !s.is_empty())
        .collect()
}

/// Asks for `n` personas, retrying once when the answer has the wrong count.
pub fn generate_personas(backend: &dyn CompletionBackend, ctx: &AgentContext, n: usize) -> Result<Vec<PersonaProfile>> {
    if n == 0 {
        return Err(Error::arg("at least one persona is required"));
    }
    let count = n.to_string();
    let request = CompletionRequest {
        system: String::new(),
        user: render(&ctx.templates.persona, &ctx.slots(&[("n_personas", &count)]))?,
        decode: DecodeParams { temperature: ctx.decode.temperature, max_tokens: ctx.decode.max_tokens.max(256 * n) },
        context: RequestContext::Personas { count: n },
    };
    let mut found = 0;
    for attempt in 0..2 {
        let blocks = parse_numbered_blocks(&backend.complete(&request)?);
        if blocks.len() == n {
            return Ok(blocks
                .into_iter()
                .enumerate()
                .map(|(persona_id, description)| PersonaProfile { persona_id, description, embedding: Vec::new() })
                .collect());
        }
        found = blocks.len();
        log::warn!("persona answer {attempt} had {found} items, expected {n}");
    }
    Err(Error::PersonaParse { expected: n, found })
}

pub fn embed_personas(personas: &mut [PersonaProfile], embedder: &dyn TextEmbedder) -> Result<()> {
    for p in personas {
        p.embedding = embed_text(embedder, &p.description)?;
    }
    Ok(())
}

/// Persona embeddings as rows.
pub fn persona_matrix(personas: &[PersonaProfile]) -> Result<Array2<f64>> {
    rows_to_matrix(personas.iter().map(|p| p.embedding.as_slice()), "persona")
}

fn rows_to_matrix<'a>(rows: impl Iterator<Item = &'a [f64]>, what: &str) -> Result<Array2<f64>> {
    let rows: Vec<&[f64]> = rows.collect();
    let dim = rows.first().map_or(0, |r| r.len());
    if dim == 0 || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::invalid(format!("{what} embeddings are missing or ragged")));
    }
    Ok(Array2::from_shape_vec((rows.len(), dim), rows.concat()).expect("checked shape"))
}

fn history_block(titles: &[String]) -> String {
    titles.join("\n")
}

/// One persona's answer for one user.
pub fn annotate_user(
    backend: &dyn CompletionBackend,
    ctx: &AgentContext,
    persona: &PersonaProfile,
    user: usize,
    history_titles: &[String],
) -> Result<AnnotationRecord> {
    if history_titles.is_empty() {
        return Err(Error::arg(format!("user {user} has no history to annotate")));
    }
    let history = history_block(history_titles);
    let request = CompletionRequest {
        system: render(&ctx.templates.annotator_system, &ctx.slots(&[("persona", &persona.description)]))?,
        user: render(&ctx.templates.annotator_user, &ctx.slots(&[("history", &history)]))?,
        decode: ctx.decode,
        context: RequestContext::Annotate { user, annotator: persona.persona_id },
    };
    let raw_text = backend.complete(&request)?;
    let label = verbalize(&raw_text, &ctx.schema)?;
    Ok(AnnotationRecord::new(user, persona.persona_id, raw_text, label, backend.tag()))
}

/// The meta-summary for one user over all of that user's annotations.
pub fn summarize_user(
    backend: &dyn CompletionBackend,
    ctx: &AgentContext,
    user: usize,
    history_titles: &[String],
    annotations: &[AnnotationRecord],
) -> Result<RationaleSummary> {
    if annotations.is_empty() {
        return Err(Error::arg(format!("user {user} has no annotations to summarize")));
    }
    let mut ordered: Vec<&AnnotationRecord> = annotations.iter().collect();
    ordered.sort_by_key(|a| a.annotator);
    let block = ordered
        .iter()
        .enumerate()
        .map(|(i, a)| format!("### Annotator {}\n{}", i + 1, a.raw_text.trim()))
        .collect::<Vec<_>>()
        .join("\n");
    let history = history_block(history_titles);
    let request = CompletionRequest {
        system: render(&ctx.templates.summarizer_system, &ctx.slots(&[]))?,
        user: render(&ctx.templates.summarizer_user, &ctx.slots(&[("history", &history), ("annotations", &block)]))?,
        decode: ctx.decode,
        context: RequestContext::Summarize { user, votes: ordered.iter().map(|a| a.label).collect() },
    };
    let summary = backend.complete(&request)?;
    let final_label = verbalize(&summary, &ctx.schema)?;
    Ok(RationaleSummary { user, summary, final_label, embedding: Vec::new() })
}

/// Titles of a user's training items, capped at `max_items`.
pub fn history_titles(ds: &InteractionDataset, titles: &[String], user: usize, max_items: usize) -> Result<Vec<String>> {
    if titles.len() != ds.item_count() {
        return Err(Error::arg(format!("{} titles for {} items", titles.len(), ds.item_count())));
    }
    Ok(ds.user_history(user, Split::Train)?.into_iter().take(max_items).map(|v| titles[v].clone()).collect())
}

/// Runs `job` over `0..n` on up to `workers` threads and returns the results
/// in index order. The first error wins.
pub fn parallel_map<T: Send>(n: usize, workers: usize, job: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let out: Mutex<BTreeMap<usize, T>> = Mutex::new(BTreeMap::new());
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n || failure.lock().map_or(true, |f| f.is_some()) {
                    break;
                }
                match job(i) {
                    Ok(v) => {
                        out.lock().expect("result lock").insert(i, v);
                    }
                    Err(e) => {
                        failure.lock().expect("error lock").get_or_insert(e);
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().expect("error lock") {
        return Err(e);
    }
    Ok(out.into_inner().expect("result lock").into_values().collect())
}

/// Annotates every `(user, persona)` pair. Records come back sorted by
/// `(user, annotator)` whatever order the requests finished in.
pub fn annotate_all(
    backend: &dyn CompletionBackend,
    ctx: &AgentContext,
    personas: &[PersonaProfile],
    histories: &[Vec<String>],
    workers: usize,
) -> Result<Vec<AnnotationRecord>> {
    let np = personas.len();
    parallel_map(histories.len() * np, workers, |i| {
        let (u, a) = (i / np, i % np);
        annotate_user(backend, ctx, &personas[a], u, &histories[u])
    })
}

/// Summarizes every user that has annotations, in user order.
pub fn summarize_all(
    backend: &dyn CompletionBackend,
    ctx: &AgentContext,
    histories: &[Vec<String>],
    annotations: &[AnnotationRecord],
    workers: usize,
) -> Result<Vec<RationaleSummary>> {
    let mut by_user: BTreeMap<usize, Vec<AnnotationRecord>> = BTreeMap::new();
    for a in annotations {
        by_user.entry(a.user).or_default().push(a.clone());
    }
    let users: Vec<usize> = by_user.keys().copied().collect();
    if let Some(&u) = users.iter().find(|&&u| u >= histories.len()) {
        return Err(Error::arg(format!("annotation for unknown user {u}")));
    }
    parallel_map(users.len(), workers, |i| {
        let u = users[i];
        summarize_user(backend, ctx, u, &histories[u], &by_user[&u])
    })
}

pub fn embed_summaries(summaries: &mut [RationaleSummary], embedder: &dyn TextEmbedder) -> Result<()> {
    for s in summaries {
        s.embedding = embed_text(embedder, &s.summary)?;
    }
    Ok(())
}

/// Rationale embeddings as an `M x E` matrix; every user needs a summary.
pub fn rationale_matrix(summaries: &[RationaleSummary], users: usize) -> Result<Array2<f64>> {
    let mut by_user: Vec<Option<&[f64]>> = vec![None; users];
    for s in summaries {
        *by_user.get_mut(s.user).ok_or_else(|| Error::arg(format!("summary for unknown user {}", s.user)))? =
            Some(s.embedding.as_slice());
    }
    if let Some(u) = by_user.iter().position(Option::is_none) {
        return Err(Error::invalid(format!("user {u} has no rationale summary")));
    }
    rows_to_matrix(by_user.into_iter().flatten(), "rationale")
}

/// Dense `users x annotators` label table; missing pairs count as abstentions.
pub fn annotation_matrix(records: &[AnnotationRecord], users: usize, annotators: usize) -> Result<AnnotationMatrix> {
    let mut labels = vec![vec![None; annotators]; users];
    for r in records {
        if r.user >= users || r.annotator >= annotators {
            return Err(Error::arg(format!("annotation ({}, {}) outside {users}x{annotators}", r.user, r.annotator)));
        }
        if r.abstained != r.label.is_none() {
            return Err(Error::invalid(format!("annotation ({}, {}) has inconsistent abstention flag", r.user, r.annotator)));
        }
        labels[r.user][r.annotator] = r.label;
    }
    AnnotationMatrix::new(annotators, labels)
}

/// Offline annotations: each pair's label is drawn from the planted
/// confusion row of the user's true label, and the text is a fixed verdict.
pub fn simulate_annotations(
    labels: &GroundTruthLabels,
    confusions: &[Array2<f64>],
    schema: &AttributeSchema,
    seed: u64,
) -> Result<Vec<AnnotationRecord>> {
    let sim = SimulatedBackend::new(labels.clone(), confusions.to_vec(), schema.clone(), seed)?;
    let mut out = Vec::with_capacity(labels.labels.len() * confusions.len());
    for u in 0..labels.labels.len() {
        for i in 0..confusions.len() {
            let l = sim.draw(u, i)?;
            out.push(AnnotationRecord::new(u, i, backend::verdict_text(schema, l), Some(l), BackendTag::Simulated));
        }
    }
    Ok(out)
}

/// Majority-vote labels per user from an annotation table.
pub fn majority_labels(ann: &AnnotationMatrix) -> Vec<Label> {
    ann.labels.iter().map(|row| crate::eval::quality::majority_vote(row)).collect()
}
