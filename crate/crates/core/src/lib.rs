//! Fair recommendation without observed sensitive attributes.
//!
//! The crate is organised along the training pipeline:
//!
//! - [`data`]: implicit-feedback datasets, core filtering, per-user splits and
//!   a planted synthetic generator.
//! - [`agents`]: persona generation, annotator inference, verbalization, rationale
//!   summaries and text embedding over pluggable completion backends.
//! - [`encoders`]: matrix-factorization tables trained with BPR, plus the frozen
//!   pretrained collaborative model.
//! - [`sensitive`]: confusion-aware sensitive representation learning (stage 1).
//! - [`mi`]: CLUB upper bound, conditional InfoNCE lower bound and the stage-2 trainer.
//! - [`eval`]: ranking metrics, attacker AUC, group fairness and label quality.
//!
//! Everything below [`nn`] is plain `f64` arithmetic with hand-written gradients;
//! every gradient is checked against central finite differences in the test suite.

pub mod agents;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
mod error;
pub mod eval;
pub mod io;
pub mod mi;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod sensitive;

pub use config::{MiConfig, TrainingConfig};
pub use data::{GroundTruthLabels, InteractionDataset, Split, SyntheticSpec};
pub use error::{Error, Result};
pub use model::FairModel;

/// Label value used throughout: `None` is an abstention.
pub type Label = Option<usize>;
