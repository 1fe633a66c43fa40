use std::fmt::Write as _;

use blindrec::agents::annotation_matrix;
use blindrec::checkpoint::{load_model, load_pretrained, read_manifest, save_model, save_pretrained};
use blindrec::encoders::{EpochLog, PretrainedCF};
use blindrec::io::lfsa;
use blindrec::mi::Stage2Log;
use blindrec::pipeline::{init_model, run_pretrain, run_stage1, run_stage2, SensitiveInputs};
use blindrec::sensitive::{confusion_csv, Stage1Log};
use blindrec::FairModel;
use ndarray::Array2;
use serde_json::json;

use super::{index_ids, write_embedding, Session};
use crate::error::{CliError, CliResult};
use crate::layout::{claim, ensure_parent, require};
use crate::TrainStage;

pub const PRETRAIN: &str = "pretrain";
pub const STAGE1: &str = "stage1";
pub const STAGE2: &str = "stage2";

fn write_text(path: &std::path::Path, text: &str) -> CliResult<()> {
    ensure_parent(path)?;
    std::fs::write(path, text)?;
    Ok(())
}

fn pretrain_curve(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss,val_recall\n");
    for l in log {
        let _ = writeln!(s, "{},{},{}", l.epoch, l.loss, l.val_recall);
    }
    s
}

fn stage1_curve(log: &[Stage1Log]) -> String {
    let mut s = String::from("epoch,bpr,sensitive,annotator_fit\n");
    for l in log {
        let _ = writeln!(s, "{},{},{},{}", l.epoch, l.bpr, l.sensitive, l.annotator_fit);
    }
    s
}

fn stage2_curve(log: &[Stage2Log]) -> String {
    let mut s = String::from("epoch,loss,ub,lb,variational_nll,val_recall\n");
    for l in log {
        let _ = writeln!(s, "{},{},{},{},{},{}", l.epoch, l.loss, l.ub, l.lb, l.variational_nll, l.val_recall);
    }
    s
}

impl Session {
    pub fn train(&mut self, stage: TrainStage) -> CliResult<()> {
        match stage {
            TrainStage::Pretrain => self.pretrain(),
            TrainStage::Stage1 => self.stage1(),
            TrainStage::Stage2 => self.stage2(),
            TrainStage::All => {
                self.pretrain()?;
                self.stage1()?;
                self.stage2()
            }
        }
    }

    pub fn load_pretrained(&self) -> CliResult<PretrainedCF> {
        let dir = self.layout.checkpoint(PRETRAIN);
        require(&dir, "pretrained checkpoint; run `train pretrain` first")?;
        Ok(load_pretrained(&dir)?)
    }

    pub fn load_stage(&self, stage: &str) -> CliResult<FairModel> {
        let dir = self.layout.checkpoint(stage);
        require(&dir, &format!("{stage} checkpoint; run `train {stage}` first"))?;
        Ok(load_model(&dir)?.0)
    }

    fn user_ids(&mut self) -> CliResult<Vec<u64>> {
        Ok(index_ids(self.data()?.ds.user_raw_ids()))
    }

    fn export(&mut self, name: &str, rows: &Array2<f64>, ids: &[u64]) -> CliResult<()> {
        write_embedding(&self.layout.embedding(name), &self.layout.embedding_index(name), rows, ids)
    }

    fn pretrain(&mut self) -> CliResult<()> {
        let dir = self.layout.checkpoint(PRETRAIN);
        claim(&dir, self.force)?;
        let seed = self.cfg.seed;
        let train = self.cfg.train.clone();
        let (cf, log) = run_pretrain(&self.data()?.ds, &train, seed)?;
        let m = save_pretrained(&dir, &cf, seed)?;
        lfsa::write(&dir.join("users.lfsa"), &cf.tables().users)?;
        lfsa::write(&dir.join("items.lfsa"), &cf.tables().items)?;
        write_text(&self.layout.curve(PRETRAIN), &pretrain_curve(&log))?;
        log::info!("pretrained for {} epochs; best val recall {:.4} at epoch {}", log.len(), cf.val_recall, cf.epoch);
        self.manifest.checkpoints.insert(PRETRAIN.into(), m.weights_sha256);
        Ok(())
    }

    /// Annotations always; rationale embeddings when the fine-grained term is
    /// on; persona embeddings when the consensus term is on.
    fn sensitive_inputs(&mut self) -> CliResult<SensitiveInputs> {
        let users = self.data()?.ds.user_count();
        let records = self.load_annotations()?;
        self.note_input("annotations", &self.layout.annotations())?;
        let annotators = match self.load_personas() {
            Ok(p) => p.len(),
            Err(_) => records.iter().map(|r| r.annotator + 1).max().unwrap_or(0),
        };
        let annotations = annotation_matrix(&records, users, annotators)?;
        if annotations.labeled_users().is_empty() {
            return Err(CliError::Missing("annotations with at least one usable label".into()));
        }
        let train = self.cfg.train.clone();
        let rationales = if train.lambda_fine > 0.0 {
            let path = self.layout.rationale_embeddings();
            require(&path, "rationale embeddings; run `summarize` first")?;
            let rows = lfsa::read(&path)?;
            let index = lfsa::read_index(&self.layout.rationale_index())?;
            let mut out = Array2::zeros((users, rows.ncols()));
            let mut seen = vec![false; users];
            for (row, &u) in index.iter().enumerate() {
                let u = u as usize;
                if u >= users {
                    return Err(CliError::Validation(format!("rationale for unknown user {u}")));
                }
                out.row_mut(u).assign(&rows.row(row));
                seen[u] = true;
            }
            if let Some(u) = seen.iter().position(|s| !s) {
                return Err(CliError::Missing(format!("rationale summary for user {u}; rerun `summarize`")));
            }
            self.note_input("rationales", &path)?;
            Some(out)
        } else {
            None
        };
        let persona_embeddings = if train.lambda_sim > 0.0 && annotators > 1 {
            let path = self.layout.persona_embeddings();
            require(&path, "persona embeddings; run `personas` first")?;
            self.note_input("personas", &path)?;
            Some(lfsa::read(&path)?)
        } else {
            None
        };
        Ok(SensitiveInputs { annotations, rationales, persona_embeddings })
    }

    fn stage1(&mut self) -> CliResult<()> {
        let pretrained = self.load_pretrained()?;
        let dir = self.layout.checkpoint(STAGE1);
        claim(&dir, self.force)?;
        let inputs = self.sensitive_inputs()?;
        let arity = self.cfg.schema()?.arity();
        let seed = self.cfg.seed;
        let train = self.cfg.train.clone();
        let mut model = init_model(&pretrained, arity, &inputs, &train, seed)?;
        let log = run_stage1(&mut model, &self.data()?.ds, &inputs, &train, seed)?;
        let fit = log.last().map_or(f64::NAN, |l| l.annotator_fit);
        let pre_hash = read_manifest(&self.layout.checkpoint(PRETRAIN))?.weights_sha256;
        let m = save_model(&dir, &model, STAGE1, seed, json!({"epochs": log.len(), "annotator_fit": fit, "pretrain_sha256": pre_hash}))?;
        for i in 0..model.confusion.len() {
            write_text(&self.layout.confusion(i), &confusion_csv(&model.confusion.realized(i)))?;
        }
        write_text(&self.layout.curve(STAGE1), &stage1_curve(&log))?;
        let ids = self.user_ids()?;
        self.export("sensitive", &model.sensitive_embeddings(), &ids)?;
        log::info!("stage 1 ran {} epochs; held-out annotator fit {fit:.4}", log.len());
        self.manifest.checkpoints.insert(STAGE1.into(), m.weights_sha256);
        Ok(())
    }

    fn stage2(&mut self) -> CliResult<()> {
        let pretrained = self.load_pretrained()?;
        let mut model = self.load_stage(STAGE1)?;
        let dir = self.layout.checkpoint(STAGE2);
        claim(&dir, self.force)?;
        let seed = self.cfg.seed;
        let train = self.cfg.train.clone();
        let log = run_stage2(&mut model, &self.data()?.ds, &pretrained, &train, seed)?;
        let best = log.iter().map(|l| l.val_recall).fold(f64::NEG_INFINITY, f64::max);
        let s1_hash = read_manifest(&self.layout.checkpoint(STAGE1))?.weights_sha256;
        let m = save_model(&dir, &model, STAGE2, seed, json!({"epochs": log.len(), "val_recall": best, "stage1_sha256": s1_hash}))?;
        write_text(&self.layout.curve(STAGE2), &stage2_curve(&log))?;
        let ids = self.user_ids()?;
        self.export("preference", &model.fair_embeddings(), &ids)?;
        let item_ids = index_ids(self.data()?.ds.item_raw_ids());
        self.export("items", &model.tables.items, &item_ids)?;
        log::info!("stage 2 ran {} epochs; best val recall {best:.4}", log.len());
        self.manifest.checkpoints.insert(STAGE2.into(), m.weights_sha256);
        Ok(())
    }
}
