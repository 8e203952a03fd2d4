use std::path::PathBuf;
use std::time::Duration;

use thiserror::Error;

use crate::graph::groups::GroupId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed model: {0}")]
    Malformed(String),

    #[error("graph has no nodes")]
    EmptyGraph,

    #[error("node `{node}`: unsupported op `{op}`")]
    UnsupportedOp { node: String, op: String },

    #[error("node `{node}`: shape inference failed: {reason}")]
    ShapeInference { node: String, reason: String },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("channel group {0} is pinned and cannot be pruned or masked")]
    PinnedGroup(GroupId),

    #[error("unknown channel group {0}")]
    UnknownGroup(GroupId),

    #[error("node `{node}` would keep {remaining} output channels, below the minimum of {min}")]
    BelowMinChannels {
        node: String,
        remaining: usize,
        min: usize,
    },

    #[error("input mismatch: {0}")]
    InputMismatch(String),

    #[error("node `{node}` produced a non-finite value")]
    NonFinite { node: String },

    #[error("node `{node}` (op `{op}`) cannot be executed by the built-in engine")]
    NotExecutable { node: String, op: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("infeasible threshold schedule: {0}")]
    Infeasible(String),

    #[error("lambda solver did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("evaluator protocol violation: {0}")]
    Protocol(String),

    #[error("evaluator timed out after {0:?}")]
    Timeout(Duration),

    #[error("evaluator failed: {0}")]
    Evaluator(String),

    #[error("fine-tune hook: {0}")]
    Hook(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{source} (checkpoint written to {})", checkpoint.display())]
    Aborted {
        #[source]
        source: Box<Error>,
        checkpoint: PathBuf,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
