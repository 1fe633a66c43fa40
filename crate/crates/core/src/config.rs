use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Hyperparameters of all three training phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Width of every latent representation.
    pub dim: usize,
    pub lr: f64,
    pub bpr_batch: usize,
    /// Sensitive-branch batch size in stage 1.
    pub sens_batch: usize,
    /// User batch for the stage-2 mutual-information terms.
    pub mi_batch: usize,
    pub init_std: f64,

    pub pretrain_epochs: usize,
    /// Early-stopping patience (epochs without validation improvement).
    pub patience: usize,
    pub eval_k: usize,

    pub stage1_epochs: usize,
    /// Minimum relative improvement of the annotator fit that resets patience.
    pub stage1_min_delta: f64,
    /// Share of annotated users held out to monitor the annotator fit.
    pub stage1_val_fraction: f64,
    /// Lets the sensitive step update the embedding tables. Off by default:
    /// per-user rows otherwise memorize individual annotator votes.
    pub stage1_table_grads: bool,
    pub lambda_sim: f64,
    pub lambda_fine: f64,
    /// Neighbours per persona in the consensus graph.
    pub neighbors: usize,
    /// Diagonal of the initial confusion logits.
    pub confusion_init: f64,

    pub stage2_epochs: usize,
    pub mi: MiConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            lr: 1e-3,
            bpr_batch: 2048,
            sens_batch: 128,
            mi_batch: 128,
            init_std: 0.01,
            pretrain_epochs: 200,
            patience: 10,
            eval_k: 20,
            stage1_epochs: 100,
            stage1_min_delta: 1e-4,
            stage1_val_fraction: 0.1,
            stage1_table_grads: false,
            lambda_sim: 1e-3,
            lambda_fine: 1e-3,
            neighbors: 1,
            confusion_init: 2.0,
            stage2_epochs: 100,
            mi: MiConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a finite non-negative number");
        }
        if self.bpr_batch == 0 || self.sens_batch == 0 || self.mi_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if self.eval_k == 0 {
            return bad("eval_k must be positive");
        }
        if !(0.0..1.0).contains(&self.stage1_val_fraction) {
            return bad("stage1_val_fraction must be in [0, 1)");
        }
        if self.lambda_sim < 0.0 || self.lambda_fine < 0.0 {
            return bad("loss weights must be non-negative");
        }
        self.mi.validate()
    }
}

/// Weights and schedule of the stage-2 bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiConfig {
    pub lambda_ub: f64,
    pub lambda_lb: f64,
    /// Weight of the sensitive embedding inside the conditional score.
    pub alpha: f64,
    /// Variational-network updates per encoder update.
    pub inner_steps: usize,
    pub variational_lr: f64,
    /// Adds an item-side InfoNCE against the frozen item table.
    pub item_side_lb: bool,
}

impl Default for MiConfig {
    fn default() -> Self {
        Self {
            lambda_ub: 0.01,
            lambda_lb: 0.1,
            alpha: 0.1,
            inner_steps: 5,
            variational_lr: 1e-2,
            item_side_lb: false,
        }
    }
}

impl MiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_ub < 0.0 || self.lambda_lb < 0.0 {
            return Err(Error::Config("lambda_ub and lambda_lb must be non-negative".into()));
        }
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be at least 1".into()));
        }
        Ok(())
    }
}
