//! Fairness-aware neural network pruning.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod fairness;
pub mod harness;
pub mod model;
pub mod pruners;

pub use autodiff::{Tape, Tensor, Var};
pub use data::{CsvSchema, Group, GroupedBatch, GroupedDataset, SplitRatios, SyntheticSpec};
pub use error::{Error, Result};
pub use fairness::{FairnessReport, GroupStats, Surrogate};
pub use model::{MaskMode, MaskedLayer, MaskedModel, Scope};
pub use harness::{RunRecord, SweepSpec};
pub use pruners::{prune, Hypergrad, Method, PruneConfig, TrainLog};
