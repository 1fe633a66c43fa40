//! Run configuration read from TOML. Every section has defaults and rejects
//! unknown keys; command-line flags override the file.

use std::path::{Path, PathBuf};

use blindrec::agents::AttributeSchema;
use blindrec::data::{InteractionFormat, LabelFormat, SplitRatios, SyntheticSpec};
use blindrec::eval::{AttackerConfig, LabelStrategy};
use blindrec::TrainingConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    /// Root seed; every component derives a named sub-seed from it.
    pub seed: u64,
    pub data: DataConfig,
    pub agents: AgentsConfig,
    pub train: TrainingConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            seed: 0,
            data: DataConfig::default(),
            agents: AgentsConfig::default(),
            train: TrainingConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Files,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub synthetic: SyntheticConfig,
    pub interactions: Option<PathBuf>,
    pub format: InteractionFormat,
    /// `iid<TAB>title` metadata; items without titles are named by raw id.
    pub titles: Option<PathBuf>,
    /// Sensitive labels for evaluation (and for the simulated backend).
    pub labels: Option<PathBuf>,
    pub label_format: LabelFormat,
    pub attribute: String,
    /// Label names in label order; also the verbalizer keywords unless the
    /// attribute is `gender`, which carries its own synonyms.
    pub label_names: Vec<String>,
    /// Users and items with fewer interactions are removed; 0 disables.
    pub core_k: usize,
    pub sample_fraction: f64,
    pub split: SplitRatios,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            synthetic: SyntheticConfig::default(),
            interactions: None,
            format: InteractionFormat::MovielensDat,
            titles: None,
            labels: None,
            label_format: LabelFormat::MovielensUsers,
            attribute: "gender".into(),
            label_names: vec!["male".into(), "female".into()],
            core_k: 10,
            sample_fraction: 1.0,
            split: SplitRatios::default(),
        }
    }
}

/// Planted generator settings; the generator seed comes from the root seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub user_count: usize,
    pub item_count: usize,
    pub group_ratio: f64,
    pub cluster_count: usize,
    pub preference_mix: f64,
    pub interactions_per_user: usize,
    pub popularity_skew: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            user_count: s.user_count,
            item_count: s.item_count,
            group_ratio: s.group_ratio,
            cluster_count: s.cluster_count,
            preference_mix: s.preference_mix,
            interactions_per_user: s.interactions_per_user,
            popularity_skew: s.popularity_skew,
        }
    }
}

impl SyntheticConfig {
    pub fn spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            user_count: self.user_count,
            item_count: self.item_count,
            group_ratio: self.group_ratio,
            cluster_count: self.cluster_count,
            preference_mix: self.preference_mix,
            interactions_per_user: self.interactions_per_user,
            popularity_skew: self.popularity_skew,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Scripted,
    Mock,
    Simulated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Hash,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentsConfig {
    pub backend: BackendKind,
    /// Number of personas, which is also the number of annotators.
    pub annotators: usize,
    /// Most recent training items shown to an annotator.
    pub history_items: usize,
    pub workers: usize,
    /// Annotation fails as a whole above this share of failed requests.
    pub max_failure_rate: f64,
    /// Recorded responses for the scripted backend (JSONL).
    pub script: Option<PathBuf>,
    /// Directory overriding the built-in prompt templates.
    pub templates: Option<PathBuf>,
    pub item_kind: String,
    pub temperature: f64,
    pub max_tokens: usize,
    pub embedder: EmbedderKind,
    pub embed_dim: usize,
    /// Simulated backend: diagonal of each annotator's planted confusion
    /// matrix; off-diagonal mass is spread evenly. One value applies to all.
    pub simulated_accuracy: Vec<f64>,
    /// Simulated backend: explicit planted matrices, one per annotator.
    /// Takes precedence over `simulated_accuracy`.
    pub confusions: Option<Vec<Vec<Vec<f64>>>>,
}

impl Default for AgentsConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Mock,
            annotators: 4,
            history_items: 50,
            workers: 4,
            max_failure_rate: 0.05,
            script: None,
            templates: None,
            item_kind: "movie".into(),
            temperature: 0.0,
            max_tokens: 512,
            embedder: EmbedderKind::Hash,
            embed_dim: 768,
            simulated_accuracy: vec![0.85],
            confusions: None,
        }
    }
}

impl AgentsConfig {
    /// Planted matrices for the simulated backend.
    pub fn planted_confusions(&self, arity: usize) -> CliResult<Vec<ndarray::Array2<f64>>> {
        let n = self.annotators;
        if let Some(rows) = &self.confusions {
            if rows.len() != n {
                return Err(CliError::Validation(format!("{} confusion matrices for {n} annotators", rows.len())));
            }
            return rows
                .iter()
                .map(|m| {
                    let flat: Vec<f64> = m.iter().flatten().copied().collect();
                    if m.len() != arity || m.iter().any(|r| r.len() != arity) {
                        return Err(CliError::Validation(format!("confusion matrices must be {arity}x{arity}")));
                    }
                    Ok(ndarray::Array2::from_shape_vec((arity, arity), flat).expect("checked shape"))
                })
                .collect();
        }
        let acc = match self.simulated_accuracy.as_slice() {
            [a] => vec![*a; n],
            v if v.len() == n => v.to_vec(),
            v => return Err(CliError::Validation(format!("{} accuracies for {n} annotators", v.len()))),
        };
        acc.iter()
            .map(|&a| {
                if !(0.0..=1.0).contains(&a) {
                    return Err(CliError::Validation(format!("accuracy {a} outside [0, 1]")));
                }
                let off = (1.0 - a) / (arity - 1) as f64;
                Ok(ndarray::Array2::from_shape_fn((arity, arity), |(i, j)| if i == j { a } else { off }))
            })
            .collect()
    }
}

/// Which user table scores recommendations during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    /// `p_u` from the stage-2 model.
    Preference,
    /// `u` from the pretrained collaborative model (the unfair baseline).
    User,
}

impl EmbeddingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingKind::Preference => "preference",
            EmbeddingKind::User => "user",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub embeddings: Vec<EmbeddingKind>,
    pub strategies: Vec<LabelStrategy>,
    pub attacker: AttackerConfig,
    /// Backbone name written to the metrics CSV.
    pub backbone: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 20,
            embeddings: vec![EmbeddingKind::Preference, EmbeddingKind::User],
            strategies: LabelStrategy::ALL.to_vec(),
            attacker: AttackerConfig::default(),
            backbone: "mf".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Missing(format!("config file {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate()?;
        if self.run_id.is_empty() || self.run_id.contains(',') {
            return Err(CliError::Validation("run_id must be non-empty and free of commas".into()));
        }
        if self.agents.annotators == 0 {
            return Err(CliError::Validation("at least one annotator is required".into()));
        }
        if !(0.0..=1.0).contains(&self.agents.max_failure_rate) {
            return Err(CliError::Validation("max_failure_rate must lie in [0, 1]".into()));
        }
        if self.agents.embed_dim == 0 || self.agents.history_items == 0 {
            return Err(CliError::Validation("embed_dim and history_items must be positive".into()));
        }
        if self.data.source == DataSource::Files && self.data.interactions.is_none() {
            return Err(CliError::Validation("data.source = \"files\" needs data.interactions".into()));
        }
        if self.eval.k == 0 {
            return Err(CliError::Validation("eval.k must be positive".into()));
        }
        self.schema()?;
        Ok(())
    }

    /// Verbalizer schema for the configured attribute.
    pub fn schema(&self) -> CliResult<AttributeSchema> {
        let names: Vec<String> = self.data.label_names.iter().map(|n| n.to_lowercase()).collect();
        let mut schema = if self.data.attribute == "gender" && names == ["male", "female"] {
            AttributeSchema::gender()
        } else {
            AttributeSchema::from_names(&self.data.attribute, &names)?
        };
        schema.item_kind = self.agents.item_kind.clone();
        Ok(schema)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
