//! Dependency-aware structural channel pruning for CNN computation graphs.
//!
//! The crate is organized around the pruning pipeline:
//!
//! * [`graph`] loads and validates ONNX models, groups coupled channels,
//!   counts FLOPs/parameters and rewrites graphs with channels removed.
//! * [`saliency`] scores channel groups by size-normalized filter ℓ1 norms and
//!   provides numeric checkers for the joint-saliency bound.
//! * [`oracle`] evaluates per-task losses, either with the built-in reference
//!   engine or through an external evaluator process.
//! * [`scheduler`] orders layers by FLOPs contribution and derives the
//!   geometric per-layer drop thresholds.
//! * [`pruner`] runs the sequential greedy loop with top-P layer filtering.
//! * [`report`] turns a recorded plan into width and sensitivity tables.

pub mod error;
pub mod graph;
pub mod oracle;
pub mod pruner;
pub mod report;
pub mod saliency;
pub mod scheduler;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::cost::{count_cost, CostConfig, CostReport};
pub use graph::groups::{build_channel_groups, ChannelAnalysis, ChannelGroup, GroupId};
pub use graph::onnx::{export_model, load_model, LoadOptions};
pub use graph::prune::apply_pruning;
pub use graph::toy::{build_toy_model, ToyArch};
pub use graph::ModelGraph;
pub use oracle::{LossOracle, TaskLossVector};
pub use pruner::{run_pruning, PruneConfig, PruningPlan};
pub use tensor::Tensor;
