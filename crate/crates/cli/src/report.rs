//! JSON report schemas written by the commands.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use slimdet::cost::{CostReport, CostUnits};
use slimdet::detection::{BBox, PriorConfig, PriorSize};
use slimdet::evaluation::{DatasetResult, EvalConfig};
use slimdet::graph::{ReceptiveField, TensorShape};
use slimdet::pipeline::{PassDescriptor, PassReport};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tool {
    pub name: String,
    pub version: String,
}

impl Tool {
    pub fn current() -> Self {
        Tool { name: "slimdet".into(), version: env!("CARGO_PKG_VERSION").into() }
    }
}

/// Hex SHA-256 of `text`.
pub fn sha256_hex(text: &[u8]) -> String {
    Sha256::digest(text).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub id: String,
    pub kind: String,
    pub output_shape: TensorShape,
    pub receptive_field: ReceptiveField,
    pub macs: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InspectReport {
    pub tool: Tool,
    pub seed: u64,
    pub model: String,
    pub units: CostUnits,
    pub input_shape: TensorShape,
    pub layers: Vec<LayerInfo>,
    pub total_macs: u64,
    pub total_params: u64,
    /// `total_macs` in `units`.
    pub total_ops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformReport {
    pub tool: Tool,
    pub seed: u64,
    pub model: String,
    pub pipeline_hash: String,
    pub pipeline: Vec<PassDescriptor>,
    pub units: CostUnits,
    pub initial_cost: CostReport,
    pub passes: Vec<PassReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TransformReport {
    pub fn final_macs(&self) -> u64 {
        self.passes.last().map_or(self.initial_cost.total_macs, |p| p.cost.total_macs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferSummary {
    pub tool: Tool,
    pub seed: u64,
    pub model: String,
    pub images: usize,
    pub detections: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tool: Tool,
    pub config: EvalConfig,
    pub result: DatasetResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsdPriorsReport {
    pub tool: Tool,
    pub config: PriorConfig,
    pub count: usize,
    pub priors: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterPriorsReport {
    pub tool: Tool,
    pub seed: u64,
    pub boxes: usize,
    pub groups: Vec<Vec<PriorSize>>,
    /// Groups placed on the levels of the base layout, when the counts agree.
    pub config: Option<PriorConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZooEmitReport {
    pub tool: Tool,
    pub seed: u64,
    pub model: String,
    pub init: String,
    pub total_macs: u64,
    pub total_params: u64,
}
