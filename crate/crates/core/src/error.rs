use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape list must not be empty")]
    EmptyShape,

    #[error("shape extents must be >= 1, got {0:?}")]
    ZeroExtent(Vec<usize>),

    #[error("standard deviation must be non-negative, got {0}")]
    NegativeStd(f64),

    #[error("{op}: expected {expected} values for shape {shape:?}, got {got}")]
    LengthMismatch {
        op: &'static str,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("split parts {parts:?} do not sum to extent {extent}")]
    InvalidSplit { parts: Vec<usize>, extent: usize },

    #[error("conv2d: {0}")]
    Conv(String),

    #[error("odd spatial extent {height}x{width}")]
    OddExtent { height: usize, width: usize },

    #[error("spatial extent {height}x{width} not divisible by {factor}")]
    Indivisible {
        height: usize,
        width: usize,
        factor: usize,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("variable belongs to a different graph")]
    ForeignVariable,

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },

    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("unknown variant `{0}`")]
    UnknownVariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
