//! File names inside a run's output directory.

use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn at(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest(&self) -> PathBuf {
        self.at("run_manifest.json")
    }
    pub fn config_snapshot(&self) -> PathBuf {
        self.at("config.toml")
    }
    pub fn split(&self) -> PathBuf {
        self.at("data/split.tsv")
    }
    pub fn personas(&self) -> PathBuf {
        self.at("agents/personas.jsonl")
    }
    pub fn persona_embeddings(&self) -> PathBuf {
        self.at("agents/personas.lfsa")
    }
    pub fn persona_index(&self) -> PathBuf {
        self.at("agents/personas.index.tsv")
    }
    pub fn annotations(&self) -> PathBuf {
        self.at("agents/annotations.jsonl")
    }
    pub fn summaries(&self) -> PathBuf {
        self.at("agents/summaries.jsonl")
    }
    pub fn rationale_embeddings(&self) -> PathBuf {
        self.at("agents/rationales.lfsa")
    }
    pub fn rationale_index(&self) -> PathBuf {
        self.at("agents/rationales.index.tsv")
    }
    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.at(&format!("checkpoints/{stage}"))
    }
    pub fn curve(&self, stage: &str) -> PathBuf {
        self.at(&format!("curves/{stage}.csv"))
    }
    pub fn confusion(&self, annotator: usize) -> PathBuf {
        self.at(&format!("confusion/annotator_{annotator}.csv"))
    }
    pub fn embedding(&self, name: &str) -> PathBuf {
        self.at(&format!("embeddings/{name}.lfsa"))
    }
    pub fn embedding_index(&self, name: &str) -> PathBuf {
        self.at(&format!("embeddings/{name}.index.tsv"))
    }
    pub fn metrics(&self) -> PathBuf {
        self.at("eval/metrics.csv")
    }
    pub fn attack_report(&self, embedding: &str) -> PathBuf {
        self.at(&format!("eval/attack_{embedding}.json"))
    }
    pub fn label_quality(&self) -> PathBuf {
        self.at("eval/label_quality.csv")
    }
}

/// Refuses to touch an existing output unless `force` is set; with `force`
/// the old output is removed first.
pub fn claim(path: &Path, force: bool) -> CliResult<()> {
    if path.exists() {
        if !force {
            return Err(CliError::Exists(path.to_path_buf()));
        }
        if path.is_dir() {
            std::fs::remove_dir_all(path)?;
        } else {
            std::fs::remove_file(path)?;
        }
    }
    ensure_parent(path)
}

pub fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(())
}

/// Fails with a missing-prerequisite error naming `what` if `path` is absent.
pub fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(format!("{what} ({})", path.display())))
    }
}
