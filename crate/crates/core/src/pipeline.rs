//! The three training phases wired together: collaborative pretraining,
//! stage 1 (sensitive branch) and stage 2 (sensitive-blind preferences).

use ndarray::Array2;

use crate::config::TrainingConfig;
use crate::data::InteractionDataset;
use crate::encoders::{pretrain_cf, EpochLog, PretrainedCF};
use crate::mi::{train_stage2, Stage2Log};
use crate::model::{FairModel, ModelDims};
use crate::sensitive::{consensus_neighbors, train_stage1, AnnotationMatrix, ConsensusGraph, Stage1Inputs, Stage1Log};
use crate::{rng, Error, Result};

/// Agent outputs consumed by stage 1.
#[derive(Clone, Debug)]
pub struct SensitiveInputs {
    pub annotations: AnnotationMatrix,
    /// One rationale embedding per user.
    pub rationales: Option<Array2<f64>>,
    /// One text embedding per persona; drives the consensus graph.
    pub persona_embeddings: Option<Array2<f64>>,
}

impl SensitiveInputs {
    pub fn graph(&self, neighbors: usize) -> Result<ConsensusGraph> {
        let n = self.annotations.annotators;
        match &self.persona_embeddings {
            Some(e) if n > 1 && neighbors > 0 => {
                if e.nrows() != n {
                    return Err(Error::arg(format!("{} persona embeddings for {n} annotators", e.nrows())));
                }
                consensus_neighbors(e, neighbors.min(n - 1))
            }
            _ => Ok(ConsensusGraph::empty(n)),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.rationales.as_ref().map_or(1, |r| r.ncols())
    }
}

/// A fresh model whose tables start from the pretrained collaborative ones.
pub fn init_model(pretrained: &PretrainedCF, arity: usize, inputs: &SensitiveInputs, config: &TrainingConfig, seed: u64) -> Result<FairModel> {
    let t = pretrained.tables();
    let dims = ModelDims {
        users: t.users.nrows(),
        items: t.items.nrows(),
        dim: t.dim(),
        arity,
        annotators: inputs.annotations.annotators,
        embed_dim: inputs.embed_dim(),
    };
    FairModel::new(dims, t.clone(), config.confusion_init, rng::sub_seed(seed, "model-init"))
}

pub fn run_stage1(model: &mut FairModel, ds: &InteractionDataset, inputs: &SensitiveInputs, config: &TrainingConfig, seed: u64) -> Result<Vec<Stage1Log>> {
    if let Some(r) = &inputs.rationales {
        if r.nrows() != ds.user_count() {
            return Err(Error::arg(format!("{} rationale rows for {} users", r.nrows(), ds.user_count())));
        }
    }
    let graph = inputs.graph(config.neighbors)?;
    let s1 = Stage1Inputs { annotations: &inputs.annotations, rationales: inputs.rationales.as_ref(), graph: &graph };
    train_stage1(model, ds, &s1, config, rng::sub_seed(seed, "stage1"))
}

pub fn run_stage2(model: &mut FairModel, ds: &InteractionDataset, pretrained: &PretrainedCF, config: &TrainingConfig, seed: u64) -> Result<Vec<Stage2Log>> {
    train_stage2(model, ds, pretrained, config, rng::sub_seed(seed, "stage2"))
}

pub fn run_pretrain(ds: &InteractionDataset, config: &TrainingConfig, seed: u64) -> Result<(PretrainedCF, Vec<EpochLog>)> {
    pretrain_cf(ds, config, rng::sub_seed(seed, "pretrain"))
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub pretrained: PretrainedCF,
    pub model: FairModel,
    pub pretrain_log: Vec<EpochLog>,
    pub stage1_log: Vec<Stage1Log>,
    pub stage2_log: Vec<Stage2Log>,
}

/// Pretraining, stage 1 and stage 2 in sequence.
pub fn train_all(ds: &InteractionDataset, inputs: &SensitiveInputs, arity: usize, config: &TrainingConfig, seed: u64) -> Result<PipelineOutput> {
    let (pretrained, pretrain_log) = run_pretrain(ds, config, seed)?;
    let mut model = init_model(&pretrained, arity, inputs, config, seed)?;
    let stage1_log = run_stage1(&mut model, ds, inputs, config, seed)?;
    let stage2_log = run_stage2(&mut model, ds, &pretrained, config, seed)?;
    Ok(PipelineOutput { pretrained, model, pretrain_log, stage1_log, stage2_log })
}
