use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LarvError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LarvError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("tensor `{name}`: {reason}")]
    MalformedTensor { name: String, reason: String },

    #[error("tensor `{name}`: truncated payload (needs bytes up to {needed}, payload has {available})")]
    TruncatedPayload {
        name: String,
        needed: usize,
        available: usize,
    },

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("tensor `{name}`: unsupported dtype `{dtype}`")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("checkpoints are not aligned at `{name}`: {reason}")]
    Misaligned { name: String, reason: String },

    #[error("parameter `{0}` matches no grouping rule and is not on the skip-list")]
    UngroupedParameter(String),

    #[error("grouping produced an empty partition")]
    EmptyPartition,

    #[error("layer group {index} has no matrix-shaped parameters")]
    GroupWithoutMatrices { index: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("target rank {k} out of range 1..={max}")]
    RankOutOfRange { k: usize, max: usize },

    #[error("spectrum has no positive singular value")]
    ZeroSpectrum,

    #[error("layer {layer}: base matrix is zero, effective rank undefined")]
    ZeroBase { layer: usize },

    #[error("layer index {layer} out of range 1..={total}")]
    LayerOutOfRange { layer: usize, total: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown schedule kind `{0}`")]
    UnknownSchedule(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("layer {layer}: {source}")]
    InLayer {
        layer: usize,
        #[source]
        source: Box<LarvError>,
    },

    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<LarvError>,
    },
}

impl LarvError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LarvError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_layer(self, layer: usize) -> Self {
        match self {
            e @ LarvError::ZeroBase { .. } => e,
            e => LarvError::InLayer {
                layer,
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        LarvError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.at_stage(stage))
    }
}
