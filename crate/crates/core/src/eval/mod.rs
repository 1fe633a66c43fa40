//! Evaluation: ranking quality, attribute leakage, group fairness and the
//! quality of inferred labels.

pub mod attack;
pub mod cluster;
pub mod fairness;
pub mod quality;
pub mod ranking;

pub use attack::{auc_binary, auc_macro, train_attacker, AttackReport, AttackerConfig};
pub use cluster::{cluster_labels, ClusterMethod};
pub use fairness::{dp_at_k, eo_at_k, group_fairness, GroupFairnessReport};
pub use quality::{align_clusters, label_quality, majority_vote, LabelQualityReport, LabelStrategy};
pub use ranking::{
    ndcg_at_k, rank_top_k, ranking_report, recall_at_k, Factorized, MetricValue, RankingReport, ScoreSource,
};
