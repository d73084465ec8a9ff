//! Data ingestion, splitting, the provider pre-pass, joint training and
//! evaluation.

mod dataset;
mod metrics;
mod prepass;
mod split;
mod standardize;
mod train;

pub use dataset::{load_csv, read_csv, LabeledDataset, Record, Task};
pub use metrics::{mae, rmse, roc_auc, MetricsReport, TargetMetrics};
pub use prepass::{enrich, enrich_with_pool, icl_prediction, molecule_seed, IclOutcome, PromptStats};
pub use split::{
    random_split, scaffold_keys, scaffold_split, split_dataset, Split, SplitAssignment, SplitMethod, DEFAULT_FRACTIONS,
};
pub use standardize::Standardizer;
pub use train::{
    build_samples, train, EpochRecord, PlateauScheduler, SchedulerStep, TrainConfig, TrainLog, TrainedModel,
};

use crate::chem::ChemError;
use crate::llm::LlmError;
use crate::model::ModelError;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("csv: {0}")]
    Csv(String),
    #[error("header must be `smiles,<target>,...` with at least one target")]
    MissingHeader,
    #[error("line {line}: expected {expected} targets, got {got}")]
    RaggedRow { line: usize, expected: usize, got: usize },
    #[error("line {line}: bad target value {value:?}")]
    BadTarget { line: usize, value: String },
    #[error("no parseable rows ({dropped} dropped)")]
    NoValidRows { dropped: usize },
    #[error("split fractions {0:?} must lie in [0, 1] and sum to 1")]
    InvalidFractions([f64; 3]),
    #[error("scaffold split needs at least 3 scaffold groups, found {groups}")]
    TooFewScaffolds { groups: usize },
    #[error("target {index} has zero variance on the training split")]
    DegenerateTarget { index: usize },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("molecule {index}: {source}")]
    Provider {
        index: usize,
        #[source]
        source: LlmError,
    },
    #[error("molecule {index}: demonstration sampling: {source}")]
    Sampling {
        index: usize,
        #[source]
        source: ChemError,
    },
    #[error("molecule {index} has no {what}; run the provider pre-pass first")]
    MissingEnrichment { index: usize, what: &'static str },
    #[error("invalid SMILES {smiles:?}: {message}")]
    InvalidSmiles { smiles: String, message: String },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl PipelineError {
    /// Data problems, as opposed to provider or configuration problems.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, PipelineError::Provider { .. } | PipelineError::Config(_))
    }
}
