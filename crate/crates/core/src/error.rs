use thiserror::Error;

use crate::tree::NodeId;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is missing, unknown or out of range.
    #[error("configuration error for `{key}`: {message}")]
    Config { key: String, message: String },

    /// An argument lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A broken internal invariant (dangling handle, double aggregation, ...).
    #[error("internal error: {0}")]
    Internal(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("environment failure at node {node:?}: {message}")]
    Environment {
        node: Option<NodeId>,
        message: String,
    },

    #[error("non-finite importance ratio at node {node:?}: {ratio}")]
    NonFiniteRatio { node: NodeId, ratio: f64 },

    #[error("full expansion refused: L = {max_depth} exceeds guard {guard} (would need {estimate} interactions)")]
    BudgetGuard {
        max_depth: usize,
        guard: usize,
        estimate: u128,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn env(message: impl Into<String>) -> Self {
        Error::Environment {
            node: None,
            message: message.into(),
        }
    }

    /// Attaches a node handle to an environment failure that lacks one.
    pub(crate) fn at_node(self, id: NodeId) -> Self {
        match self {
            Error::Environment {
                node: None,
                message,
            } => Error::Environment {
                node: Some(id),
                message,
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
