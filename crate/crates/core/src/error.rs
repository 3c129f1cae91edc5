use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Checkpoint decoding failures. Each variant is a distinct failure kind so
/// callers can tell a foreign file from a damaged one.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("file truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("inconsistent shape table: {0}")]
    ShapeTable(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what} did not converge after {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("{0} has not been trained")]
    Untrained(String),

    #[error("rank {rank} is not an admissible choice for slot {slot}")]
    RankNotInChoices { slot: String, rank: usize },

    #[error("no configuration satisfies the FLOPs window [{lower}, {upper}] after {draws} draws")]
    InfeasibleWindow { lower: u64, upper: u64, draws: usize },

    #[error("missing prerequisite artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
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
}
