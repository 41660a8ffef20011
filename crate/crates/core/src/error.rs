use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("incompatible {what} version {found} (expected {expected})")]
    Version { what: &'static str, found: u32, expected: u32 },

    #[error("hash mismatch for {path}: manifest records {expected}, file has {found}")]
    HashMismatch { path: PathBuf, expected: String, found: String },

    #[error("cannot place {n_balls} balls of radius {radius} after {attempts} attempts")]
    CannotPlaceBalls { n_balls: usize, radius: f64, attempts: usize },

    #[error("training diverged in {stage} stage at step {step}{}: loss {value}",
        .discriminator.map(|k| format!(" (discriminator {k})")).unwrap_or_default())]
    Divergence { stage: String, step: u64, discriminator: Option<usize>, value: f64 },

    #[error("frozen frame generator was modified: hash {before} became {after}")]
    FrozenViolation { before: String, after: String },

    #[error("latent dimension mismatch: {0}")]
    LatentMismatch(String),

    #[error("clip has {0} frames; at least 2 are needed")]
    ClipTooShort(usize),

    #[error("neighbourhood graph is disconnected ({components} components)")]
    Disconnected { components: usize },

    #[error("embedding needs {needed} positive eigenvalues, found {found}")]
    Degenerate { needed: usize, found: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(PathBuf),

    #[error("run directory {0} is locked by another stage")]
    Locked(PathBuf),

    #[error("refusing to overwrite completed output {0}")]
    AlreadyComplete(PathBuf),

    #[error("image encoding failed: {0}")]
    Image(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io { path: path.into(), source })
    }
}
