//! Configuration, the gradient-accumulation training loop, metric files and
//! run comparison.

mod compare;
mod config;
mod run;

pub use compare::{compare_runs, read_metrics, Comparison, MetricsRow};
pub use config::{preset, DatasetKind, ExperimentConfig, PRESETS};
pub use run::{
    build_network, evaluate, load_run, metrics_csv, run_experiment, train, RunOutcome, RunSummary, TimingRow,
    TrainHooks, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, REPORT_FILE, TIMING_FILE,
};

use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;
use crate::net::NetError;
use crate::verify::VerifyError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure at step {step}: {message}")]
    Numeric { step: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed metrics: {message}")]
    Metrics { path: PathBuf, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
}

impl ExperimentError {
    /// Process exit code: 2 configuration, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Numeric { .. } => 3,
            ExperimentError::Io { .. } | ExperimentError::Metrics { .. } => 4,
            ExperimentError::Data(e) => match e {
                DataError::Io { .. } | DataError::MissingFile(_) | DataError::Truncated { .. } | DataError::BadLabel { .. } => 4,
                _ => 2,
            },
            ExperimentError::Net(e) => match e {
                NetError::Io(_) | NetError::Checkpoint(_) => 4,
                NetError::Shape { .. } | NetError::Label { .. } => 2,
                _ => 3,
            },
            ExperimentError::Verify(e) => match e {
                VerifyError::Config(_) | VerifyError::Unseeded(_) => 2,
                _ => 3,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

pub(crate) fn write_file(path: &std::path::Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}
