//! Graph-to-graph compression passes.
//!
//! Every pass is pure: it borrows the input graph and weights and returns
//! fresh ones, leaving the originals untouched. Passes that change channel
//! counts keep coupled residual groups consistent.

use thiserror::Error;

use crate::graph::GraphError;

mod bn_fold;
mod dilation;
mod pca;
mod prune;
mod subsample;

pub use bn_fold::{fold_bn, FoldOutcome};
pub use dilation::rewrite_stride_to_dilation;
pub use pca::{pca_decompose, RankChoice};
pub use prune::{
    apply_selection, compute_l1_metrics, iterative_prune, iterative_prune_with, mask_channels, one_shot_prune,
    prunable_units, prune_count, random_sample_channels, select_prune, ChannelSelection, FilterMetric, IterativeOutcome,
    PruneSchedule, PruneUnit, RoundRecord, StopReason,
};
pub use subsample::subsample_kernel;

#[derive(Debug, Error, PartialEq)]
pub enum TransformError {
    #[error("invalid graph: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Graph(Vec<GraphError>),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("layer `{layer}` is a {kind}, expected {expected}")]
    WrongKind { layer: String, kind: &'static str, expected: &'static str },
    #[error("layer `{0}` has stride 1; nothing to remove")]
    NotStrided(String),
    #[error("layer `{layer}`: {reason}")]
    Unsupported { layer: String, reason: String },
    #[error("layer `{layer}`: missing weight `{name}`")]
    MissingWeight { layer: String, name: String },
    #[error("invalid selection for `{layer}`: {detail}")]
    InvalidSelection { layer: String, detail: String },
    #[error("coupled layers {layers:?} need identical channel selections")]
    CoupledMismatch { layers: Vec<String> },
    #[error("layer `{0}` would be left without channels")]
    WouldEmpty(String),
    #[error("invalid prune schedule: {0}")]
    Schedule(String),
    #[error("rank {rank} is invalid for layer `{layer}` (max {max})")]
    Rank { layer: String, rank: usize, max: usize },
    #[error("layer `{0}` has all-zero filters")]
    Degenerate(String),
}

impl From<GraphError> for TransformError {
    fn from(e: GraphError) -> Self {
        TransformError::Graph(vec![e])
    }
}

pub(crate) fn check_valid(graph: &crate::graph::Graph) -> Result<(), TransformError> {
    graph.validate().map_err(TransformError::Graph)
}

pub(crate) fn weight<'a>(
    weights: &'a crate::tensor::WeightStore,
    layer: &str,
    name: &str,
) -> Result<&'a crate::tensor::Tensor, TransformError> {
    weights
        .get(layer, name)
        .ok_or_else(|| TransformError::MissingWeight { layer: layer.to_string(), name: name.to_string() })
}
