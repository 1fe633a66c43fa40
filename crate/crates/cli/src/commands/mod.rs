//! Command implementations over a shared [`Session`].

mod agents;
mod evaluate;
mod train;

use std::path::Path;

use blindrec::data::{
    core_filter, generate_synthetic, load_interactions, load_labels, load_titles, sample_users, split_per_user,
    write_split_file,
};
use blindrec::io::{lfsa, sha256_file};
use blindrec::{rng, GroundTruthLabels, InteractionDataset};
use ndarray::Array2;

pub use agents::{annotator_seed, make_backend, make_embedder};

use crate::config::{DataSource, RunConfig};
use crate::error::CliResult;
use crate::layout::{ensure_parent, Layout};
use crate::manifest::{unix_now, CommandRecord, RunManifest};

/// The dataset every command works on, rebuilt deterministically from the
/// configuration.
#[derive(Clone, Debug)]
pub struct Data {
    pub ds: InteractionDataset,
    /// Evaluation and simulation labels, when available.
    pub truth: Option<GroundTruthLabels>,
    pub titles: Vec<String>,
}

pub struct Session {
    pub cfg: RunConfig,
    pub layout: Layout,
    pub force: bool,
    pub manifest: RunManifest,
    data: Option<Data>,
}

impl Session {
    pub fn open(cfg: RunConfig, layout: Layout, force: bool) -> CliResult<Self> {
        std::fs::create_dir_all(&layout.root)?;
        let manifest = RunManifest::open(&layout.manifest(), &cfg)?;
        std::fs::write(layout.config_snapshot(), cfg.to_toml())?;
        Ok(Self { cfg, layout, force, manifest, data: None })
    }

    /// Runs a command and appends it to the manifest, which is saved even
    /// when the command fails part-way.
    pub fn record(&mut self, name: &str, f: impl FnOnce(&mut Self) -> CliResult<()>) -> CliResult<()> {
        let started = unix_now();
        let result = f(self);
        if result.is_ok() {
            self.manifest.commands.push(CommandRecord { command: name.into(), started_unix: started, finished_unix: unix_now() });
        }
        self.manifest.save(&self.layout.manifest())?;
        result
    }

    pub fn seed(&self, name: &str) -> u64 {
        rng::sub_seed(self.cfg.seed, name)
    }

    pub fn data(&mut self) -> CliResult<&Data> {
        if self.data.is_none() {
            let data = load_data(&self.cfg)?;
            let split = self.layout.split();
            ensure_parent(&split)?;
            write_split_file(&split, &data.ds)?;
            self.note_input("split", &split)?;
            let d = self.cfg.data.clone();
            if d.source == DataSource::Files {
                for (role, path) in [("interactions", d.interactions), ("titles", d.titles), ("labels", d.labels)] {
                    if let Some(p) = path {
                        self.note_input(role, &p)?;
                    }
                }
            }
            self.data = Some(data);
        }
        Ok(self.data.as_ref().expect("loaded above"))
    }

    /// Records the hash of a consumed file under `role`.
    pub fn note_input(&mut self, role: &str, path: &Path) -> CliResult<()> {
        self.manifest.inputs.insert(role.into(), sha256_file(path)?);
        Ok(())
    }

    pub fn pipeline(&mut self) -> CliResult<()> {
        self.personas()?;
        self.annotate()?;
        self.summarize()?;
        self.train(crate::TrainStage::All)?;
        self.evaluate()?;
        Ok(())
    }
}

/// Synthetic data is generated from the root seed; file data goes through
/// user sampling, core filtering and the per-user split.
pub fn load_data(cfg: &RunConfig) -> CliResult<Data> {
    let d = &cfg.data;
    let split_seed = rng::sub_seed(cfg.seed, "split");
    match d.source {
        DataSource::Synthetic => {
            let spec = d.synthetic.spec(rng::sub_seed(cfg.seed, "data"));
            let (ds, truth, titles) = generate_synthetic(&spec)?;
            let ds = split_per_user(&ds, d.split, split_seed)?;
            Ok(Data { ds, truth: Some(truth), titles })
        }
        DataSource::Files => {
            let path = d.interactions.as_ref().expect("validated");
            if !path.exists() {
                return Err(crate::CliError::Missing(format!("interaction file {}", path.display())));
            }
            let mut ds = load_interactions(path, d.format)?;
            if d.sample_fraction < 1.0 {
                ds = sample_users(&ds, d.sample_fraction, rng::sub_seed(cfg.seed, "sample"))?;
            }
            if d.core_k > 0 {
                ds = core_filter(&ds, d.core_k)?;
            }
            let ds = split_per_user(&ds, d.split, split_seed)?;
            let titles = match &d.titles {
                Some(p) => load_titles(p, &ds)?,
                None => ds.item_raw_ids().iter().map(|r| format!("item {r}")).collect(),
            };
            let truth = match &d.labels {
                Some(p) => Some(load_labels(p, d.label_format, &ds, &d.label_names)?),
                None => None,
            };
            Ok(Data { ds, truth, titles })
        }
    }
}

/// Row ids for embedding index files: raw ids when they are all numeric,
/// dense indices otherwise.
pub fn index_ids(raw: &[String]) -> Vec<u64> {
    let parsed: Option<Vec<u64>> = raw.iter().map(|r| r.parse().ok()).collect();
    parsed.unwrap_or_else(|| (0..raw.len() as u64).collect())
}

pub fn write_embedding(path: &Path, index: &Path, rows: &Array2<f64>, ids: &[u64]) -> CliResult<()> {
    ensure_parent(path)?;
    lfsa::write(path, rows)?;
    lfsa::write_index(index, ids)?;
    Ok(())
}
