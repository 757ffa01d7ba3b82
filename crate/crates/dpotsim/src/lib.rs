//! Federated-learning backdoor attack/defense simulator.
//!
//! The crate models a full FL round protocol (distribute, locally train,
//! collect parameter-difference updates, aggregate) on desk-scale dense
//! networks, with three attack pipelines (optimized sparse trigger, fixed
//! pixel-pattern trigger, distributed fixed trigger) and ten server-side
//! aggregation rules. A separate [`theory`] module verifies the attack's
//! concealment argument numerically on a linear-regression model.
//!
//! Everything is seeded and deterministic: the same configuration always
//! produces byte-identical round logs.

pub mod attack;
pub mod config;
pub mod data;
pub mod defenses;
pub mod fed;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod theory;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value, unknown identifier, or precondition breach.
    #[error("configuration error: {0}")]
    Config(String),
    /// Tensor/model dimension mismatch.
    #[error("shape error: {0}")]
    Shape(String),
    /// Malformed binary or text input (bad magic, bad field).
    #[error("format error: {0}")]
    Format(String),
    /// Paired inputs that disagree (e.g. image/label counts).
    #[error("consistency error: {0}")]
    Consistency(String),
    /// Cosine similarity of a zero matrix.
    #[error("undefined similarity: {0}")]
    UndefinedSimilarity(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
