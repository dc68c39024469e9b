//! Pipeline runner for the `caselink` binary: layered configuration, the
//! stage implementations, the hash-chained run manifest and run comparison.
//!
//! Exit codes: 0 on success, 2 when an upstream stage is missing or its
//! artifacts no longer verify, 3 on configuration errors, 1 otherwise.

use std::path::{Path, PathBuf};

use caselink_core::casegnn::CaseGnnError;
use caselink_core::promptcase::ViewError;
use caselink_core::{CorpusError, EncoderError, EvalError, GraphError, LexicalError, NeuralError, TrainError};
use thiserror::Error;

pub mod compare;
pub mod config;
pub mod manifest;
pub mod pipeline;

pub use compare::{compare_runs, CompareReport, MetricComparison};
pub use config::PipelineConfig;
pub use manifest::{RunManifest, Stage, StageRecord};
pub use pipeline::RunContext;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("stage `{stage}` is not usable ({reason}); run `caselink {stage}` first")]
    Upstream { stage: Stage, reason: String },
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("run directory is locked by another invocation: {0} (delete it if no run is active)")]
    Locked(PathBuf),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    View(#[from] ViewError),
    #[error(transparent)]
    CaseGnn(#[from] CaseGnnError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Lexical(#[from] LexicalError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Upstream { .. } => 2,
            CliError::Config(_) => 3,
            _ => 1,
        }
    }
}
