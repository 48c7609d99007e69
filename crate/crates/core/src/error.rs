//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A matrix or sequence has the wrong shape. `name` identifies the
    /// offending object (e.g. `"W_K"`).
    #[error("shape mismatch in {name}: expected {expected}, got {actual}")]
    Shape {
        name: &'static str,
        expected: String,
        actual: String,
    },

    /// Read index precedes the impulse index.
    #[error("read index {read} precedes impulse index {impulse}")]
    IndexOrder { impulse: usize, read: usize },

    /// A non-finite value appeared while evolving or reading out a state.
    #[error("non-finite value at step {step} while {stage}")]
    Overflow { step: usize, stage: &'static str },

    /// The recurrent path only exists for linear readout maps.
    #[error("recurrent evaluation requires a linear readout map; `{readout}` is nonlinear")]
    NonlinearReadout { readout: String },

    /// A rule would admit |eigenvalue| > 1 without `allow_unstable`.
    #[error("evolution rule is unstable ({detail}); set `allow_unstable` to construct it anyway")]
    Unstable { detail: String },

    /// Householder direction of length zero: the reflection hyperplane is undefined.
    #[error("householder direction is zero at step {step}; reflection hyperplane undefined")]
    ZeroDirection { step: usize },

    /// A spec or config failed validation.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A task spec cannot produce instances with the requested structure.
    #[error("infeasible task spec: {0}")]
    InfeasibleTask(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at batch index {batch_index}")]
    NonFiniteLoss { batch_index: usize },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub(crate) fn shape(name: &'static str, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::Shape {
            name,
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
