use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("judgment sequence is empty")]
    EmptyJudgments,

    #[error("need at least 2 judgments, found {found}")]
    InsufficientJudgments { found: usize },

    #[error("judgment value {0} outside 1..=4")]
    InvalidJudgment(i64),

    #[error("invalid annotator code {code:?} at position {position}: {reason}")]
    CodeParse {
        code: String,
        position: usize,
        reason: String,
    },

    #[error("invalid threshold set: {0}")]
    InvalidThresholds(String),

    #[error("invalid population: {0}")]
    InvalidPopulation(String),

    #[error("invalid usage pair {instance_id}: {reason}")]
    InvalidPair { instance_id: String, reason: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: missing required column {column:?}", path.display())]
    MissingColumn { path: PathBuf, column: String },

    #[error("line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },

    #[error("line {line}: duplicate instance_id {id:?}")]
    DuplicateId { line: usize, id: String },

    #[error("no vector stored for ({instance_id}, side {side})")]
    MissingVector { instance_id: String, side: u8 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("corrupt store at {}: {reason}", path.display())]
    CorruptStore { path: PathBuf, reason: String },

    #[error("{what} needs at least {needed} rows, found {found}")]
    TooFewRows {
        what: &'static str,
        needed: usize,
        found: usize,
    },

    #[error("centered data has no variance; principal direction undefined")]
    DegenerateSpectrum,

    #[error("zero-norm vector{}", instance_id.as_ref().map(|id| format!(" for instance {id}")).unwrap_or_default())]
    ZeroVector { instance_id: Option<String> },

    #[error("Krippendorff's alpha undefined: {0}")]
    UndefinedAlpha(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("objective is not finite at the start simplex")]
    InvalidStart,

    #[error("infeasible ensemble strategy: {0}")]
    InfeasibleStrategy(String),

    #[error("no store or fitted resources for {0}")]
    MissingStore(String),

    #[error("need at least {needed} annotations, found {found}")]
    InsufficientAnnotators { needed: usize, found: usize },

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
