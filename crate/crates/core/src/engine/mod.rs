//! The epoch loop: cluster, select and annotate pairs, re-assign, train,
//! evaluate. [`Session`] holds the state machine; oracle, human and replay
//! annotators all feed it through [`Session::submit_verdict`].

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::annotation::AnnotationError;
use crate::clustering::ClusteringError;
use crate::dataset::DatasetError;
use crate::evaluation::EvaluationError;
use crate::selection::SelectionError;
use crate::trainer::TrainerError;

pub mod config;
pub mod persist;
pub mod session;
pub mod synth;

pub use config::{EngineConfig, Mode};
pub use session::{
    evaluate_projection, run_iteration, run_to_completion, Annotator, OracleAnnotator, PendingPair,
    Phase, ReplayAnnotator, RunSnapshot, Session, Step, Submitted,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Clustering(#[from] ClusteringError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
    #[error("pair {0} is stale")]
    StalePair(u64),
    #[error("pair {0} was never issued")]
    UnknownPair(u64),
    #[error("operation needs phase {expected}, session is in {found}")]
    WrongPhase {
        expected: &'static str,
        found: String,
    },
    #[error("ledger record {seq} does not match the session: {reason}")]
    ReplayDivergence { seq: u64, reason: String },
    #[error("replay ledger is exhausted")]
    ReplayExhausted,
    #[error("snapshot: {0}")]
    Snapshot(String),
}

impl EngineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        EngineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;
