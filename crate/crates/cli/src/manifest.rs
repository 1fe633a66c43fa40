//! Per-run record of what went in and what came out.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliResult;
use crate::layout::ensure_parent;

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub backbone: String,
    pub metric: String,
    /// Cutoff for ranking metrics; `None` for cutoff-free metrics.
    pub k: Option<usize>,
    pub value: f64,
    pub seed: u64,
}

pub const METRICS_HEADER: &str = "run_id,backbone,metric,k,value,seed";

impl MetricRow {
    pub fn csv(&self) -> String {
        let k = self.k.map(|k| k.to_string()).unwrap_or_default();
        format!("{},{},{},{},{},{}", self.run_id, self.backbone, self.metric, k, self.value, self.seed)
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub command: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub seed: u64,
    pub config: RunConfig,
    /// SHA-256 of every input file, keyed by role.
    pub inputs: BTreeMap<String, String>,
    /// Weight hash of every checkpoint, keyed by stage.
    pub checkpoints: BTreeMap<String, String>,
    pub metrics: Vec<MetricRow>,
    pub commands: Vec<CommandRecord>,
}

impl RunManifest {
    /// Loads the manifest of a previous command, or starts a new one. The
    /// configuration snapshot always reflects the latest command.
    pub fn open(path: &Path, config: &RunConfig) -> CliResult<Self> {
        let mut m = match std::fs::read_to_string(path) {
            Ok(text) => serde_json::from_str(&text)?,
            Err(_) => Self {
                run_id: config.run_id.clone(),
                seed: config.seed,
                config: config.clone(),
                inputs: BTreeMap::new(),
                checkpoints: BTreeMap::new(),
                metrics: Vec::new(),
                commands: Vec::new(),
            },
        };
        m.run_id = config.run_id.clone();
        m.seed = config.seed;
        m.config = config.clone();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        ensure_parent(path)?;
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}
