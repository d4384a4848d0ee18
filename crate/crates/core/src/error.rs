use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HpanError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HpanError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic {found:?}, expected \"HPTN\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: unsupported container version {version} / dtype {dtype}")]
    Unsupported { path: PathBuf, version: u32, dtype: u32 },

    #[error("{path}: truncated, expected {expected} bytes but found {found}")]
    Truncated { path: PathBuf, expected: u64, found: u64 },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("support image {index} has no foreground pixel at {level}")]
    EmptySupportMask { index: usize, level: &'static str },

    #[error("no query pixel reaches the foreground threshold {tau}")]
    NoQueryForeground { tau: f64 },

    #[error("k-means: {0}")]
    KMeans(String),

    #[error(
        "full attention needs {required} score MACs, above the {limit} guard; reduce T*HW or K*HW by {factor:.1}x"
    )]
    GuardExceeded { required: u128, limit: u128, factor: f64 },

    #[error("finite-difference evaluation is not finite at coordinate {index}")]
    NonFiniteProbe { index: usize },

    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("gradient check failed for: {}", groups.join(", "))]
    GradCheck { groups: Vec<String> },

    #[error("manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl HpanError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HpanError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        HpanError::Shape(msg.into())
    }
}
