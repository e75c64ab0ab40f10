use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid edge ({0}, {1}) for a graph with {2} joints")]
    InvalidEdge(usize, usize, usize),
    #[error("graph contains a cycle")]
    CyclicGraph,
    #[error("graph is not connected")]
    DisconnectedGraph,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("heatmap of joint {joint} sums to {sum}, expected 1")]
    UnnormalizedHeatmap { joint: usize, sum: f64 },
    #[error("search space |Ω|^N = {size} exceeds the cap {cap}")]
    SearchSpaceTooLarge { size: f64, cap: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown update function `{0}`")]
    UnknownUpdateFunction(String),
    #[error("pairwise normalizer vanished for pair ({u}, {v}) at voxel {q}")]
    DegenerateNormalizer { u: usize, v: usize, q: usize },
    #[error("gradient tape already consumed")]
    TapeConsumed,
    #[error("ground truth of joint {0} lies outside the grid")]
    GtOutsideGrid(usize),
    #[error("degenerate point configuration")]
    DegenerateConfiguration,
    #[error("limb ({0}, {1}) has zero length")]
    ZeroLengthLimb(usize, usize),
    #[error("pose does not fit the grid box after {0} attempts")]
    BoxTooSmall(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
