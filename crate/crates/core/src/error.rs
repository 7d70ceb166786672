use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the simulator, learner, and fitting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("perturbed viewing angle {angle:.6} rad reaches the horizon limit (pi/2)")]
    AngleDomain { angle: f64 },

    #[error("episode already finished; call reset before stepping")]
    EpisodeFinished,

    #[error("input dimension mismatch: network expects {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite training loss ({loss}) at optimizer step {step}")]
    NonFiniteLoss { loss: f64, step: u64 },

    #[error("empty batch")]
    EmptyBatch,

    #[error("model kind {model} cannot be evaluated at sigma_v = {sigma_v}")]
    IncompatibleModel { model: String, sigma_v: f64 },

    #[error("no density estimate for scenario {0}")]
    MissingScenario(u32),

    #[error("empty sigma grid")]
    EmptyGrid,

    #[error("no finite samples to estimate a density from")]
    NoSamples,

    #[error("{path}:{line}: {message}")]
    Data {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
