//! Experiment orchestration: configuration, the per-cell pipeline, sweeps,
//! CSV records, and the command-line interface.

pub mod cli;
pub mod config;
pub mod record;
pub mod run;
pub mod selftest;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::{ExperimentConfig, Mapping, SigmaSource};
pub use record::{read_csv, to_csv, write_csv, ResultRecord};
pub use run::{cells, run_cell, sweep, write_outputs, Cell, ImageOutcome, SweepOutput};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint {0} not found; run `genofdma train` first")]
    MissingCheckpoint(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(String),
    #[error("cell failed: {0}")]
    Cell(String),
    #[error(transparent)]
    Diffusion(#[from] crate::diffusion::DiffusionError),
    #[error(transparent)]
    Nullspace(#[from] crate::nullspace::NullspaceError),
    #[error(transparent)]
    Linop(#[from] crate::linop::LinopError),
    #[error(transparent)]
    Ofdma(#[from] crate::ofdma::OfdmaError),
    #[error(transparent)]
    Modem(#[from] crate::modem::ModemError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Dataset(#[from] crate::datasets::DatasetError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
