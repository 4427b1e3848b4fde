use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the registration engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("dimension mismatch: {context}: {left:?} vs {right:?}")]
    DimensionMismatch {
        context: &'static str,
        left: [usize; 3],
        right: [usize; 3],
    },

    #[error("channel mismatch: {context}: {left} vs {right}")]
    ChannelMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    #[error("degenerate axis {axis} (size {size}) in {context}")]
    DegenerateAxis {
        context: &'static str,
        axis: usize,
        size: usize,
    },

    #[error("singular affine matrix (|det| = {0:e})")]
    SingularMatrix(f64),

    #[error("constant image: zero intensity variance")]
    ConstantImage,

    #[error("wrong volume kind: expected {expected}, found {found}")]
    WrongKind {
        expected: &'static str,
        found: &'static str,
    },

    #[error(
        "search radius {radius} exceeds the materialized memory guard ({max}); use streaming mode"
    )]
    RadiusTooLarge { radius: usize, max: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("fold-free deformation not reached after {retries} rescaling retries (min det {min_det:.4})")]
    FoldingNotResolved { retries: usize, min_det: f64 },

    #[error("{0}")]
    Format(#[from] crate::io::FormatError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable short identifier; format errors report their own code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidVolume(_) => "invalid-volume",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::ChannelMismatch { .. } => "channel-mismatch",
            Error::DegenerateAxis { .. } => "degenerate-axis",
            Error::SingularMatrix(_) => "singular-matrix",
            Error::ConstantImage => "constant-image",
            Error::WrongKind { .. } => "wrong-kind",
            Error::RadiusTooLarge { .. } => "radius-too-large",
            Error::InvalidConfig(_) => "invalid-config",
            Error::FoldingNotResolved { .. } => "folding-not-resolved",
            Error::Format(e) => e.code(),
            Error::Io { .. } => "io",
        }
    }

    /// True for errors caused by reading or writing files.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Format(_))
    }
}
