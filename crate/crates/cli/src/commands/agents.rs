use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;

use blindrec::agents::{
    annotate_user, embed_personas, embed_summaries, generate_personas, history_titles, parallel_map, persona_matrix,
    summarize_user, AgentContext, AnnotationRecord, CompletionBackend, DecodeParams, HashEmbedder, HttpBackend,
    HttpEmbedder, MockBackend, PersonaProfile, RationaleSummary, ScriptedBackend, SimulatedBackend, Templates,
    TextEmbedder,
};
use blindrec::io::jsonl;
use blindrec::rng;
use ndarray::Array2;

use super::{write_embedding, Data, Session};
use crate::config::{BackendKind, EmbedderKind, RunConfig};
use crate::error::{CliError, CliResult};
use crate::layout::{claim, ensure_parent, require};

/// Requests handed to the worker pool at once; results are appended to disk
/// after every chunk, so an interrupted run loses at most one chunk.
const CHUNK_PER_WORKER: usize = 16;

/// Seed of the simulated backend's label draws.
pub fn annotator_seed(root: u64) -> u64 {
    rng::sub_seed(root, "annotators")
}

pub fn make_backend(cfg: &RunConfig, data: &Data) -> CliResult<Box<dyn CompletionBackend>> {
    let schema = cfg.schema()?;
    Ok(match cfg.agents.backend {
        BackendKind::Mock => Box::new(MockBackend::new(schema, rng::sub_seed(cfg.seed, "mock"))?),
        BackendKind::Simulated => {
            let truth = data
                .truth
                .clone()
                .ok_or_else(|| CliError::Missing("sensitive labels for the simulated backend (data.labels)".into()))?;
            let planted = cfg.agents.planted_confusions(truth.arity)?;
            Box::new(SimulatedBackend::new(truth, planted, schema, annotator_seed(cfg.seed))?)
        }
        BackendKind::Scripted => {
            let path = cfg
                .agents
                .script
                .as_ref()
                .ok_or_else(|| CliError::Validation("the scripted backend needs agents.script".into()))?;
            require(path, "scripted responses")?;
            Box::new(ScriptedBackend::load(path)?)
        }
        BackendKind::Http => Box::new(HttpBackend::from_env()?),
    })
}

pub fn make_embedder(cfg: &RunConfig) -> CliResult<Box<dyn TextEmbedder>> {
    let dim = cfg.agents.embed_dim;
    Ok(match cfg.agents.embedder {
        EmbedderKind::Hash => Box::new(HashEmbedder::new(dim, rng::sub_seed(cfg.seed, "embedder"))?),
        EmbedderKind::Http => Box::new(HttpEmbedder::from_env(dim)?),
    })
}

fn agent_context(cfg: &RunConfig) -> CliResult<AgentContext> {
    let mut ctx = AgentContext::new(cfg.schema()?)?;
    if let Some(dir) = &cfg.agents.templates {
        require(dir, "prompt template directory")?;
        ctx.templates = Templates::from_dir(dir)?;
    }
    ctx.decode = DecodeParams { temperature: cfg.agents.temperature, max_tokens: cfg.agents.max_tokens };
    Ok(ctx)
}

/// Runs `jobs` in chunks, appending successes to `path` in job order.
/// Returns how many jobs failed.
fn run_appending<J: Sync, R: serde::Serialize + Send>(
    path: &std::path::Path,
    jobs: &[J],
    workers: usize,
    job: impl Fn(&J) -> blindrec::Result<R> + Sync,
    describe: impl Fn(&J) -> String,
) -> CliResult<usize> {
    ensure_parent(path)?;
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut failed = 0;
    let chunk = workers.max(1) * CHUNK_PER_WORKER;
    for part in jobs.chunks(chunk) {
        let results = parallel_map(part.len(), workers, |i| Ok(job(&part[i])))?;
        for (j, r) in part.iter().zip(results) {
            match r {
                Ok(record) => jsonl::append(&mut file, &record)?,
                Err(e) => {
                    failed += 1;
                    log::warn!("{} failed: {e}", describe(j));
                }
            }
        }
    }
    Ok(failed)
}

fn check_failures(what: &str, failed: usize, total: usize, threshold: f64) -> CliResult<()> {
    if failed == 0 {
        return Ok(());
    }
    let rate = failed as f64 / total as f64;
    if rate > threshold {
        return Err(CliError::Transport(format!(
            "{failed} of {total} {what} requests failed ({:.1}% > {:.1}% allowed); rerun to retry the missing ones",
            100.0 * rate,
            100.0 * threshold
        )));
    }
    log::warn!("{failed} of {total} {what} requests failed; rerun to retry them");
    Ok(())
}

impl Session {
    fn backend(&mut self) -> CliResult<Box<dyn CompletionBackend>> {
        self.data()?;
        make_backend(&self.cfg, self.data.as_ref().expect("loaded above"))
    }

    fn histories(&mut self) -> CliResult<Vec<Vec<String>>> {
        let max = self.cfg.agents.history_items;
        let data = self.data()?;
        (0..data.ds.user_count())
            .map(|u| Ok(history_titles(&data.ds, &data.titles, u, max)?))
            .collect()
    }

    pub fn load_personas(&self) -> CliResult<Vec<PersonaProfile>> {
        let path = self.layout.personas();
        require(&path, "personas; run `personas` first")?;
        Ok(jsonl::read(&path)?)
    }

    pub fn load_annotations(&self) -> CliResult<Vec<AnnotationRecord>> {
        let path = self.layout.annotations();
        require(&path, "annotations; run `annotate` first")?;
        Ok(jsonl::read(&path)?)
    }

    pub fn personas(&mut self) -> CliResult<()> {
        for p in [self.layout.personas(), self.layout.persona_embeddings(), self.layout.persona_index()] {
            claim(&p, self.force)?;
        }
        let backend = self.backend()?;
        let ctx = agent_context(&self.cfg)?;
        let mut personas = generate_personas(backend.as_ref(), &ctx, self.cfg.agents.annotators)?;
        embed_personas(&mut personas, make_embedder(&self.cfg)?.as_ref())?;
        jsonl::write(&self.layout.personas(), &personas)?;
        let ids: Vec<u64> = personas.iter().map(|p| p.persona_id as u64).collect();
        write_embedding(&self.layout.persona_embeddings(), &self.layout.persona_index(), &persona_matrix(&personas)?, &ids)?;
        log::info!("wrote {} personas to {}", personas.len(), self.layout.personas().display());
        Ok(())
    }

    /// One record per `(user, persona)`. Pairs already on disk are skipped,
    /// so rerunning after an interruption only fetches what is missing.
    pub fn annotate(&mut self) -> CliResult<()> {
        let personas = self.load_personas()?;
        let path = self.layout.annotations();
        if self.force && path.exists() {
            std::fs::remove_file(&path)?;
        }
        let done: BTreeSet<(usize, usize)> = if path.exists() {
            jsonl::read::<AnnotationRecord>(&path)?.iter().map(|r| (r.user, r.annotator)).collect()
        } else {
            BTreeSet::new()
        };
        let histories = self.histories()?;
        let mut jobs = Vec::new();
        for (u, h) in histories.iter().enumerate() {
            if h.is_empty() {
                log::warn!("user {u} has no training history; skipped");
                continue;
            }
            jobs.extend((0..personas.len()).filter(|&a| !done.contains(&(u, a))).map(|a| (u, a)));
        }
        log::info!("{} annotation requests to send ({} already on disk)", jobs.len(), done.len());
        let backend = self.backend()?;
        let ctx = agent_context(&self.cfg)?;
        let failed = run_appending(
            &path,
            &jobs,
            self.cfg.agents.workers,
            |&(u, a)| annotate_user(backend.as_ref(), &ctx, &personas[a], u, &histories[u]),
            |&(u, a)| format!("annotation of user {u} by persona {a}"),
        )?;
        check_failures("annotation", failed, jobs.len(), self.cfg.agents.max_failure_rate)
    }

    /// One summary per user with a complete set of annotations, then the
    /// rationale embeddings of every summary on disk.
    pub fn summarize(&mut self) -> CliResult<()> {
        let records = self.load_annotations()?;
        let annotators = match self.load_personas() {
            Ok(p) => p.len(),
            Err(_) => records.iter().map(|r| r.annotator + 1).max().unwrap_or(0),
        };
        let path = self.layout.summaries();
        if self.force {
            for p in [&path, &self.layout.rationale_embeddings(), &self.layout.rationale_index()] {
                if p.exists() {
                    std::fs::remove_file(p)?;
                }
            }
        }
        let done: BTreeSet<usize> = if path.exists() {
            jsonl::read::<RationaleSummary>(&path)?.iter().map(|s| s.user).collect()
        } else {
            BTreeSet::new()
        };
        let mut by_user: BTreeMap<usize, Vec<AnnotationRecord>> = BTreeMap::new();
        for r in records {
            by_user.entry(r.user).or_default().push(r);
        }
        let histories = self.histories()?;
        let mut jobs = Vec::new();
        for u in 0..histories.len() {
            if done.contains(&u) {
                continue;
            }
            match by_user.get_mut(&u) {
                Some(recs) if recs.len() >= annotators => {
                    recs.sort_by_key(|r| r.annotator);
                    jobs.push(u);
                }
                Some(recs) => log::warn!("user {u} has {} of {annotators} annotations; skipped", recs.len()),
                None => log::warn!("user {u} has no annotations; skipped"),
            }
        }
        log::info!("{} summary requests to send ({} already on disk)", jobs.len(), done.len());
        let backend = self.backend()?;
        let ctx = agent_context(&self.cfg)?;
        let failed = run_appending(
            &path,
            &jobs,
            self.cfg.agents.workers,
            |&u| summarize_user(backend.as_ref(), &ctx, u, &histories[u], &by_user[&u]),
            |&u| format!("summary of user {u}"),
        )?;
        check_failures("summary", failed, jobs.len(), self.cfg.agents.max_failure_rate)?;

        let mut summaries: Vec<RationaleSummary> = if path.exists() { jsonl::read(&path)? } else { Vec::new() };
        summaries.sort_by_key(|s| s.user);
        if summaries.is_empty() {
            return Err(CliError::Missing("no user could be summarized".into()));
        }
        embed_summaries(&mut summaries, make_embedder(&self.cfg)?.as_ref())?;
        let rows: Vec<f64> = summaries.iter().flat_map(|s| s.embedding.iter().copied()).collect();
        let matrix = Array2::from_shape_vec((summaries.len(), self.cfg.agents.embed_dim), rows)
            .map_err(|e| CliError::Validation(format!("rationale embeddings: {e}")))?;
        let ids: Vec<u64> = summaries.iter().map(|s| s.user as u64).collect();
        write_embedding(&self.layout.rationale_embeddings(), &self.layout.rationale_index(), &matrix, &ids)?;
        log::info!("wrote {} summaries", summaries.len());
        Ok(())
    }
}
