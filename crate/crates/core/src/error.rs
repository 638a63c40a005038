use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("format error: missing required property `{0}`")]
    MissingProperty(String),

    #[error("cloud has no Gaussians")]
    EmptyCloud,

    #[error("degenerate temporal covariance (sigma_tt = {0:e})")]
    DegenerateCovariance(f64),

    #[error("invalid camera frame: {0}")]
    InvalidFrame(String),

    #[error("rendering frame {frame} failed: {source}")]
    Render {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("selection would retain no Gaussians")]
    EmptySelection,

    #[error("stale scores: {0}")]
    StaleScores(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("quantization staging error: {0}")]
    Staging(String),

    #[error("divergence in {stage}: loss {current:e} exceeds 10x initial loss {initial:e} at step {step}")]
    Divergence {
        stage: String,
        step: usize,
        initial: f64,
        current: f64,
    },

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("bad container magic")]
    BadMagic,

    #[error("unknown version {0}")]
    UnknownVersion(u16),

    #[error("truncated container: {0}")]
    Truncated(String),

    #[error("checksum mismatch in section `{section}`")]
    Checksum { section: String },

    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors raised while reading a damaged or foreign container.
    pub fn is_container_damage(&self) -> bool {
        matches!(
            self,
            Error::BadMagic
                | Error::UnknownVersion(_)
                | Error::Truncated(_)
                | Error::Checksum { .. }
                | Error::Decode(_)
        )
    }
}
