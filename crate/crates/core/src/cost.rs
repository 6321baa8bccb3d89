//! Multiply-accumulate and parameter accounting.
//!
//! "FLOPs" in the headline numbers are multiply-accumulates counted once.
//! Convolutions count every kernel tap at every output position (including
//! taps that fall on zero padding); batch norm counts a multiply and an add
//! per element. ReLU, pooling, additions and concatenation count as zero
//! unless [`CostOptions::include_elementwise`] is set.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, GraphError, LayerNode, Op, TensorShape};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub macs: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCostEntry {
    pub layer_id: String,
    pub kind: String,
    pub macs: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub per_layer: Vec<LayerCostEntry>,
    pub total_macs: u64,
    pub total_params: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CostOptions {
    /// Count relu, pooling and eltwise operations as well.
    pub include_elementwise: bool,
}

/// Units for printed operation counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostUnits {
    #[default]
    Macs,
    /// Two floating-point operations per multiply-accumulate.
    Flops2x,
}

impl CostUnits {
    pub fn scale(self, macs: u64) -> u64 {
        match self {
            CostUnits::Macs => macs,
            CostUnits::Flops2x => 2 * macs,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            CostUnits::Macs => "GMACs",
            CostUnits::Flops2x => "GFLOPs(2x)",
        }
    }
}

/// Cost of one layer given its input shapes and output shape.
pub fn layer_cost(node: &LayerNode, in_shapes: &[TensorShape], out: TensorShape) -> LayerCost {
    layer_cost_with(node, in_shapes, out, CostOptions::default())
}

pub fn layer_cost_with(node: &LayerNode, in_shapes: &[TensorShape], out: TensorShape, opts: CostOptions) -> LayerCost {
    let spatial = (out.n * out.h * out.w) as u64;
    match &node.op {
        Op::Conv(s) | Op::DepthwiseConv(s) => {
            let in_c = in_shapes.first().map_or(0, |x| x.c);
            let taps = (in_c / s.groups.max(1) * s.kernel_h * s.kernel_w) as u64;
            let bias = if s.has_bias { s.out_channels as u64 } else { 0 };
            LayerCost { macs: s.out_channels as u64 * spatial * taps, params: s.out_channels as u64 * taps + bias }
        }
        Op::BatchNorm(_) => LayerCost { macs: 2 * out.numel() as u64, params: 4 * out.c as u64 },
        _ if !opts.include_elementwise => LayerCost::default(),
        Op::Relu | Op::Softmax => LayerCost { macs: out.numel() as u64, params: 0 },
        Op::MaxPool(p) | Op::AvgPool(p) => LayerCost { macs: (out.numel() * p.kernel.h * p.kernel.w) as u64, params: 0 },
        Op::EltwiseAdd => LayerCost { macs: (out.numel() * in_shapes.len().saturating_sub(1)) as u64, params: 0 },
        Op::Concat => LayerCost::default(),
    }
}

/// Full per-layer accounting of `graph` at its declared input shape.
pub fn report(graph: &Graph) -> Result<CostReport, GraphError> {
    report_with(graph, CostOptions::default())
}

/// Accounting at a different input shape.
pub fn report_at(graph: &Graph, input_shape: TensorShape) -> Result<CostReport, GraphError> {
    let g = Graph { input_shape, ..graph.clone() };
    report(&g)
}

pub fn report_with(graph: &Graph, opts: CostOptions) -> Result<CostReport, GraphError> {
    let shapes = graph.infer_shapes()?;
    let mut per_layer = Vec::with_capacity(graph.nodes.len());
    for node in graph.sorted_nodes()? {
        let ins: Vec<TensorShape> = node.inputs.iter().map(|i| shapes[i]).collect();
        let c = layer_cost_with(node, &ins, shapes[&node.id], opts);
        per_layer.push(LayerCostEntry { layer_id: node.id.clone(), kind: node.op.kind().into(), macs: c.macs, params: c.params });
    }
    let total_macs = per_layer.iter().map(|e| e.macs).sum();
    let total_params = per_layer.iter().map(|e| e.params).sum();
    Ok(CostReport { per_layer, total_macs, total_params })
}

impl CostReport {
    pub fn gmacs(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    /// Aligned-column table of every layer followed by the totals.
    pub fn to_table(&self, units: CostUnits) -> String {
        let width = self.per_layer.iter().map(|e| e.layer_id.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:<14}  {:>14}  {:>10}", "layer", "kind", "ops", "params");
        for e in &self.per_layer {
            let _ = writeln!(s, "{:<width$}  {:<14}  {:>14}  {:>10}", e.layer_id, e.kind, units.scale(e.macs), e.params);
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:<14}  {:>14}  {:>10}",
            "total",
            "",
            units.scale(self.total_macs),
            self.total_params
        );
        let _ = writeln!(
            s,
            "{:.4} {}  {:.4} MParams",
            units.scale(self.total_macs) as f64 / 1e9,
            units.label(),
            self.mparams()
        );
        s
    }
}
