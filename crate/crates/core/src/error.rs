use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is not connected to any tensor that requires a gradient")]
    DetachedGraph,

    #[error("backward already ran on this tape; start a new tape before the next step")]
    BackwardAlreadyRun,

    #[error("rank {rank} is invalid for a {c_out}x3x1x{c_in} kernel (must be 1..={max})")]
    RankBound {
        rank: usize,
        c_out: usize,
        c_in: usize,
        max: usize,
    },

    #[error("unknown species id {0}")]
    UnknownSpecies(usize),

    #[error("species {species}: batch of {len} samples is too small for training-mode batch norm")]
    BatchTooSmall { species: usize, len: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("missing loss for species {0}")]
    MissingSpeciesLoss(usize),

    #[error("batch size {batch_size} is not divisible by species count {species} (nearest valid: {suggestion})")]
    IndivisibleBatch {
        batch_size: usize,
        species: usize,
        suggestion: usize,
    },

    #[error("species {0} has no samples")]
    EmptySpecies(usize),

    #[error("species {species}, class {class}: {count} samples is fewer than {folds} folds")]
    TooFewForFolds {
        species: usize,
        class: usize,
        count: usize,
        folds: usize,
    },

    #[error("fraction {fraction} leaves species {species} class {class} with no samples")]
    FractionTooSmall {
        fraction: f64,
        species: usize,
        class: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (first offending tensor: {path})")]
    NonFiniteLoss { epoch: usize, batch: usize, path: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("recording group {group}: timestamps not increasing at line {line}")]
    NonMonotoneTime { group: String, line: usize },

    #[error("unknown activity labels in {path}: {labels:?}")]
    UnknownActivity { path: PathBuf, labels: Vec<String> },

    #[error("invalid archive: {0}")]
    Archive(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (files, configs, arguments)
    /// rather than a defect in the library.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            Error::NonScalarLoss(_)
                | Error::DetachedGraph
                | Error::BackwardAlreadyRun
                | Error::Shape { .. }
                | Error::NonFiniteLoss { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
