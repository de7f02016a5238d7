//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("target sparsity {omega} is infeasible: {detail}")]
    InfeasibleOmega { omega: f64, detail: String },

    #[error("prune count {count} exceeds active count {active}")]
    PruneCountExceedsActive { count: usize, active: usize },

    #[error("growth count {count} exceeds inactive count {inactive}")]
    GrowCountExceedsInactive { count: usize, inactive: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("membership split half `{0}` is empty")]
    EmptySplitHalf(&'static str),

    #[error("batch is missing membership flags")]
    MissingMembershipFlags,

    #[error("MIA accuracy is zero; TM-score is undefined")]
    ZeroMiaAccuracy,

    #[error("no candidate reports to select from")]
    NoCandidates,

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("csv error at row {row}, column `{column}`: {message}")]
    CsvCell {
        row: usize,
        column: String,
        message: String,
    },

    #[error("csv error: {0}")]
    Csv(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("report error: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attach the round index in which a stage failed.
    pub fn in_round(self, round: usize) -> Error {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }

    /// Exit code classification for the CLI: 2 for configuration
    /// problems, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::CsvCell { .. } | Error::Csv(_) => 2,
            Error::Round { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}
