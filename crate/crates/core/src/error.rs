use thiserror::Error;

use crate::graddiff::GradError;

/// Failures while evaluating a model on data.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("non-finite {what} in sequence {seq_id:?}{}", event.map(|e| format!(" at event {e}")).unwrap_or_default())]
    NonFinite {
        what: &'static str,
        seq_id: String,
        event: Option<usize>,
    },
    #[error("event type {k} outside the model's {num_types} types")]
    TypeOutOfRange { k: usize, num_types: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Grad(#[from] GradError),
}
