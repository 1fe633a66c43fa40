use std::fmt::Write as _;

use blindrec::agents::{annotation_matrix, majority_labels};
use blindrec::data::Split;
use blindrec::eval::{
    cluster_labels, group_fairness, label_quality, ranking_report, train_attacker, ClusterMethod, Factorized,
    LabelQualityReport, LabelStrategy,
};
use blindrec::{GroundTruthLabels, Label};
use ndarray::Array2;
use rand::Rng as _;
use serde_json::json;

use super::{index_ids, write_embedding, Session};
use crate::config::EmbeddingKind;
use crate::error::CliResult;
use crate::layout::{claim, ensure_parent};
use crate::manifest::{metrics_csv, MetricRow};

use super::train::STAGE2;

impl Session {
    /// User and item tables scoring recommendations for one embedding kind.
    fn tables_for(&self, kind: EmbeddingKind) -> CliResult<(Array2<f64>, Array2<f64>)> {
        Ok(match kind {
            EmbeddingKind::Preference => {
                let model = self.load_stage(STAGE2)?;
                (model.fair_embeddings(), model.tables.items.clone())
            }
            EmbeddingKind::User => {
                let cf = self.load_pretrained()?;
                (cf.tables().users.clone(), cf.tables().items.clone())
            }
        })
    }

    /// Writes the metrics CSV, one attack report per embedding and the
    /// label-quality table. Returns the metric rows.
    pub fn evaluate(&mut self) -> CliResult<Vec<MetricRow>> {
        let layout = self.layout.clone();
        claim(&layout.metrics(), self.force)?;
        let cfg = self.cfg.clone();
        let k = cfg.eval.k;
        let row = |metric: String, k: Option<usize>, value: f64| MetricRow {
            run_id: cfg.run_id.clone(),
            backbone: cfg.eval.backbone.clone(),
            metric,
            k,
            value,
            seed: cfg.seed,
        };
        let attack_seed = self.seed("attacker");
        let data = self.data()?.clone();
        let ids = index_ids(data.ds.user_raw_ids());
        if data.truth.is_none() {
            log::warn!("no sensitive labels configured; leakage, group-fairness and label-quality metrics are skipped");
        }
        let mut rows = Vec::new();
        for &kind in &cfg.eval.embeddings {
            let name = kind.as_str();
            let (users, items) = self.tables_for(kind)?;
            let emb_path = layout.embedding(name);
            write_embedding(&emb_path, &layout.embedding_index(name), &users, &ids)?;
            let source = Factorized::new(&users, &items);
            let rank = ranking_report(&source, &data.ds, Split::Test, k)?;
            rows.push(row(format!("{name}.recall"), Some(k), rank.recall_at_k));
            rows.push(row(format!("{name}.ndcg"), Some(k), rank.ndcg_at_k));
            if let Some(truth) = &data.truth {
                let attack = train_attacker(&users, truth, attack_seed, &cfg.eval.attacker)?;
                let report = json!({
                    "auc": attack.auc,
                    "n_train": attack.n_train,
                    "n_test": attack.n_test,
                    "seed": attack.seed,
                    "embedding_file": emb_path.strip_prefix(&layout.root).unwrap_or(&emb_path),
                });
                let path = layout.attack_report(name);
                ensure_parent(&path)?;
                std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
                rows.push(row(format!("{name}.attacker_auc"), None, attack.auc));
                let fair = group_fairness(&source, &data.ds, &truth.labels, truth.arity, k)?;
                rows.push(row(format!("{name}.dp"), Some(k), fair.dp_at_k));
                rows.push(row(format!("{name}.eo"), Some(k), fair.eo_at_k));
            }
            log::info!("{name}: recall@{k} {:.4}, ndcg@{k} {:.4}", rank.recall_at_k, rank.ndcg_at_k);
        }
        let csv = metrics_csv(&rows);
        ensure_parent(&layout.metrics())?;
        std::fs::write(layout.metrics(), &csv)?;

        if let Some(truth) = &data.truth {
            let reports = self.label_reports(truth)?;
            let mut table = String::from("run_id,strategy,accuracy,f1,evaluated,abstained\n");
            for r in &reports {
                let _ = writeln!(table, "{},{},{},{},{},{}", cfg.run_id, r.strategy, r.accuracy, r.f1, r.evaluated, r.abstained);
            }
            std::fs::write(layout.label_quality(), table)?;
        }
        self.manifest.metrics = rows.clone();
        Ok(rows)
    }

    /// Label quality of every configured strategy that has its inputs.
    fn label_reports(&mut self, truth: &GroundTruthLabels) -> CliResult<Vec<LabelQualityReport>> {
        let users = truth.labels.len();
        let annotations = match self.load_annotations() {
            Ok(records) => {
                let annotators = records.iter().map(|r| r.annotator + 1).max().unwrap_or(0);
                Some(annotation_matrix(&records, users, annotators)?)
            }
            Err(_) => None,
        };
        let cf_users = self.load_pretrained().ok().map(|cf| cf.tables().users.clone());
        let mut out = Vec::new();
        for &strategy in &self.cfg.eval.strategies.clone() {
            let predicted: Vec<Label> = match strategy {
                LabelStrategy::Random => {
                    let mut r = blindrec::rng::rng(self.seed("random-labels"));
                    (0..users).map(|_| Some(r.random_range(0..truth.arity))).collect()
                }
                LabelStrategy::Kmeans | LabelStrategy::Gmm | LabelStrategy::Hierarchical => {
                    let Some(x) = &cf_users else {
                        log::warn!("{strategy} skipped: no pretrained user embeddings");
                        continue;
                    };
                    let method = match strategy {
                        LabelStrategy::Kmeans => ClusterMethod::Kmeans,
                        LabelStrategy::Gmm => ClusterMethod::Gmm,
                        _ => ClusterMethod::Hierarchical,
                    };
                    cluster_labels(x, method, truth.arity, self.seed("cluster"))?.into_iter().map(Some).collect()
                }
                LabelStrategy::LlmSingle | LabelStrategy::LlmMv => {
                    let Some(ann) = &annotations else {
                        log::warn!("{strategy} skipped: no annotations");
                        continue;
                    };
                    if strategy == LabelStrategy::LlmSingle {
                        ann.labels.iter().map(|row| row.first().copied().flatten()).collect()
                    } else {
                        majority_labels(ann)
                    }
                }
            };
            out.push(label_quality(&predicted, truth, strategy)?);
        }
        Ok(out)
    }
}
