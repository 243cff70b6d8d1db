use std::io;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("integration diverged at t = {time}: non-finite derivative")]
    IntegrationDiverged { time: f64 },

    #[error("bilinear discretization singular at step {delta}: condition estimate {condition:e}")]
    DiscretizationSingular { delta: f64, condition: f64 },

    #[error("numeric error at step {step}: {what}")]
    Numeric { step: usize, what: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("knowledge mask overlaps known support at ({row}, {col}) in {system}")]
    SupportOverlap {
        system: String,
        row: usize,
        col: usize,
    },

    #[error("rollout failed at step {step}: {source}")]
    Rollout {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
