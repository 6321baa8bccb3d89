//! Computation-graph representation for small detection networks.
//!
//! A [`Graph`] is a list of [`LayerNode`]s wired together by id. The
//! reserved id [`INPUT`] names the graph input tensor. All shape math uses
//! `(n, c, h, w)` semantics.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Reserved node id that refers to the graph input.
pub const INPUT: &str = "input";

/// Four-dimensional activation shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorShape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl TensorShape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        TensorShape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn is_valid(&self) -> bool {
        self.n >= 1 && self.c >= 1 && self.h >= 1 && self.w >= 1
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

impl Serialize for TensorShape {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.dims().serialize(s)
    }
}

impl<'de> Deserialize<'de> for TensorShape {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [n, c, h, w] = <[usize; 4]>::deserialize(d)?;
        let shape = TensorShape { n, c, h, w };
        if !shape.is_valid() {
            return Err(D::Error::custom(format!("tensor shape {shape} has a zero dimension")));
        }
        Ok(shape)
    }
}

/// A per-axis `(h, w)` integer pair. Serialized as a bare number when both
/// axes agree and as `[h, w]` otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pair {
    pub h: usize,
    pub w: usize,
}

impl Pair {
    pub const fn square(v: usize) -> Self {
        Pair { h: v, w: v }
    }

    pub const fn new(h: usize, w: usize) -> Self {
        Pair { h, w }
    }

    pub fn map(self, f: impl Fn(usize) -> usize) -> Self {
        Pair { h: f(self.h), w: f(self.w) }
    }

    pub fn zip(self, other: Pair, f: impl Fn(usize, usize) -> usize) -> Self {
        Pair { h: f(self.h, other.h), w: f(self.w, other.w) }
    }
}

impl From<usize> for Pair {
    fn from(v: usize) -> Self {
        Pair::square(v)
    }
}

impl Serialize for Pair {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.h == self.w {
            self.h.serialize(s)
        } else {
            [self.h, self.w].serialize(s)
        }
    }
}

impl<'de> Deserialize<'de> for Pair {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            One(usize),
            Two([usize; 2]),
        }
        Ok(match Repr::deserialize(d)? {
            Repr::One(v) => Pair::square(v),
            Repr::Two([h, w]) => Pair::new(h, w),
        })
    }
}

fn default_one() -> Pair {
    Pair::square(1)
}

fn default_groups() -> usize {
    1
}

/// Hyper-parameters of a (possibly grouped or dilated) 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    #[serde(default = "default_one")]
    pub stride: Pair,
    #[serde(default)]
    pub pad: Pair,
    #[serde(default = "default_one")]
    pub dilation: Pair,
    #[serde(default = "default_groups")]
    pub groups: usize,
    #[serde(default)]
    pub has_bias: bool,
}

impl Default for Pair {
    fn default() -> Self {
        Pair::square(0)
    }
}

impl ConvSpec {
    /// Square kernel, unit stride, no padding, no bias.
    pub fn new(out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: Pair::square(1),
            pad: Pair::square(0),
            dilation: Pair::square(1),
            groups: 1,
            has_bias: false,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = Pair::square(s);
        self
    }

    pub fn pad(mut self, p: usize) -> Self {
        self.pad = Pair::square(p);
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = Pair::square(d);
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn kernel(&self) -> Pair {
        Pair::new(self.kernel_h, self.kernel_w)
    }

    /// Input span covered by one output: `dilation * (kernel - 1) + 1`.
    pub fn effective_kernel(&self) -> Pair {
        self.kernel().zip(self.dilation, |k, d| d * (k - 1) + 1)
    }
}

/// Max/average pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub kernel: Pair,
    #[serde(default = "default_one")]
    pub stride: Pair,
    #[serde(default)]
    pub pad: Pair,
}

impl PoolSpec {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        PoolSpec { kernel: kernel.into(), stride: stride.into(), pad: pad.into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchNormSpec {
    pub epsilon: f64,
}

impl Default for BatchNormSpec {
    fn default() -> Self {
        BatchNormSpec { epsilon: 1e-5 }
    }
}

/// Layer operation together with its kind-specific parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Conv(ConvSpec),
    DepthwiseConv(ConvSpec),
    BatchNorm(BatchNormSpec),
    Relu,
    MaxPool(PoolSpec),
    AvgPool(PoolSpec),
    EltwiseAdd,
    Concat,
    Softmax,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Conv(_) => "conv",
            Op::DepthwiseConv(_) => "depthwise_conv",
            Op::BatchNorm(_) => "batch_norm",
            Op::Relu => "relu",
            Op::MaxPool(_) => "max_pool",
            Op::AvgPool(_) => "avg_pool",
            Op::EltwiseAdd => "eltwise_add",
            Op::Concat => "concat",
            Op::Softmax => "softmax",
        }
    }

    pub fn conv_spec(&self) -> Option<&ConvSpec> {
        match self {
            Op::Conv(s) | Op::DepthwiseConv(s) => Some(s),
            _ => None,
        }
    }

    pub fn conv_spec_mut(&mut self) -> Option<&mut ConvSpec> {
        match self {
            Op::Conv(s) | Op::DepthwiseConv(s) => Some(s),
            _ => None,
        }
    }

    pub fn pool_spec(&self) -> Option<&PoolSpec> {
        match self {
            Op::MaxPool(s) | Op::AvgPool(s) => Some(s),
            _ => None,
        }
    }

    /// Layers with a spatial window (convolutions and pools).
    pub fn is_spatial(&self) -> bool {
        self.conv_spec().is_some() || self.pool_spec().is_some()
    }

    /// Single-input ops whose output channel `c` depends only on input
    /// channel `c`.
    pub fn is_channelwise(&self) -> bool {
        matches!(
            self,
            Op::DepthwiseConv(_) | Op::BatchNorm(_) | Op::Relu | Op::MaxPool(_) | Op::AvgPool(_)
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNode {
    pub id: String,
    pub op: Op,
    pub inputs: Vec<String>,
}

impl LayerNode {
    pub fn new(id: impl Into<String>, op: Op, inputs: &[&str]) -> Self {
        LayerNode { id: id.into(), op, inputs: inputs.iter().map(|s| s.to_string()).collect() }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: String,
    kind: String,
    inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spec: Option<serde_json::Value>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EmptySpec {}

impl Serialize for LayerNode {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let spec = match &self.op {
            Op::Conv(c) | Op::DepthwiseConv(c) => Some(serde_json::to_value(c)),
            Op::BatchNorm(b) => Some(serde_json::to_value(b)),
            Op::MaxPool(p) | Op::AvgPool(p) => Some(serde_json::to_value(p)),
            _ => None,
        }
        .transpose()
        .map_err(serde::ser::Error::custom)?;
        RawNode { id: self.id.clone(), kind: self.op.kind().into(), inputs: self.inputs.clone(), spec }
            .serialize(s)
    }
}

impl<'de> Deserialize<'de> for LayerNode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawNode::deserialize(d)?;
        let spec = raw.spec.unwrap_or_else(|| serde_json::Value::Object(Default::default()));
        let ctx = |e: serde_json::Error| D::Error::custom(format!("layer `{}`: {e}", raw.id));
        let op = match raw.kind.as_str() {
            "conv" => Op::Conv(serde_json::from_value(spec).map_err(ctx)?),
            "depthwise_conv" => Op::DepthwiseConv(serde_json::from_value(spec).map_err(ctx)?),
            "batch_norm" => Op::BatchNorm(serde_json::from_value(spec).map_err(ctx)?),
            "max_pool" => Op::MaxPool(serde_json::from_value(spec).map_err(ctx)?),
            "avg_pool" => Op::AvgPool(serde_json::from_value(spec).map_err(ctx)?),
            kind @ ("relu" | "eltwise_add" | "concat" | "softmax") => {
                serde_json::from_value::<EmptySpec>(spec).map_err(ctx)?;
                match kind {
                    "relu" => Op::Relu,
                    "eltwise_add" => Op::EltwiseAdd,
                    "concat" => Op::Concat,
                    _ => Op::Softmax,
                }
            }
            other => {
                return Err(D::Error::custom(format!("layer `{}`: unknown kind `{other}`", raw.id)))
            }
        };
        Ok(LayerNode { id: raw.id, op, inputs: raw.inputs })
    }
}

/// A directed acyclic network of layers. `outputs` lists the node ids whose
/// tensors are returned by execution (the detection-head layers for the zoo
/// models).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Graph {
    pub input_shape: TensorShape,
    pub nodes: Vec<LayerNode>,
    pub outputs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("duplicate layer id `{0}`")]
    DuplicateId(String),
    #[error("layer `{layer}`: dangling input `{input}`")]
    DanglingInput { layer: String, input: String },
    #[error("graph output `{0}` does not name a layer")]
    UnknownOutput(String),
    #[error("layer `{0}` is part of a cycle")]
    Cycle(String),
    #[error("layer `{layer}`: expected {expected} input(s), got {got}")]
    Arity { layer: String, expected: &'static str, got: usize },
    #[error("layer `{layer}`: channel mismatch: {detail}")]
    ChannelMismatch { layer: String, detail: String },
    #[error("layer `{layer}`: shape mismatch: {detail}")]
    ShapeMismatch { layer: String, detail: String },
    #[error("layer `{layer}`: group mismatch: {detail}")]
    GroupMismatch { layer: String, detail: String },
    #[error("layer `{layer}`: invalid parameters: {detail}")]
    InvalidSpec { layer: String, detail: String },
    #[error("layer `{0}`: non-positive output dimension")]
    NonPositiveOutput(String),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("reserved id `{INPUT}` used as a layer id")]
    ReservedId,
}

impl GraphError {
    /// Layer the error refers to, when there is one.
    pub fn layer(&self) -> Option<&str> {
        match self {
            GraphError::DuplicateId(l)
            | GraphError::UnknownOutput(l)
            | GraphError::Cycle(l)
            | GraphError::NonPositiveOutput(l)
            | GraphError::UnknownLayer(l) => Some(l),
            GraphError::DanglingInput { layer, .. }
            | GraphError::Arity { layer, .. }
            | GraphError::ChannelMismatch { layer, .. }
            | GraphError::ShapeMismatch { layer, .. }
            | GraphError::GroupMismatch { layer, .. }
            | GraphError::InvalidSpec { layer, .. } => Some(layer),
            GraphError::ReservedId => None,
        }
    }
}

/// Inferred activation shape per node id, including [`INPUT`].
pub type ShapeMap = HashMap<String, TensorShape>;

/// Receptive field of one activation, measured in input pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub size_h: usize,
    pub size_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
}

/// Convolutions whose output channels meet at elementwise additions and must
/// therefore be pruned with a single shared mask. A group is `pinned` when
/// one of the additions also consumes channels that cannot be pruned (the
/// graph input or a concatenation).
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CoupledGroup {
    pub member_layer_ids: Vec<String>,
    pub pinned: bool,
}

impl Graph {
    pub fn new(input_shape: TensorShape, nodes: Vec<LayerNode>, outputs: Vec<String>) -> Self {
        Graph { input_shape, nodes, outputs }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serialization is infallible")
    }

    pub fn node(&self, id: &str) -> Option<&LayerNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut LayerNode> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect()
    }

    /// Map from node id (or [`INPUT`]) to the ids of the nodes that read it,
    /// in node order.
    pub fn consumers(&self) -> HashMap<&str, Vec<&str>> {
        let mut out: HashMap<&str, Vec<&str>> = HashMap::new();
        for node in &self.nodes {
            for input in &node.inputs {
                let list = out.entry(input.as_str()).or_default();
                if !list.contains(&node.id.as_str()) {
                    list.push(node.id.as_str());
                }
            }
        }
        out
    }

    /// Node indices in a topological order that is stable with respect to
    /// declaration order. Fails on cycles and dangling references.
    pub fn topo_order(&self) -> Result<Vec<usize>, GraphError> {
        let index = self.index();
        let mut indegree = vec![0usize; self.nodes.len()];
        let mut users: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for input in &node.inputs {
                if input == INPUT {
                    continue;
                }
                let &p = index.get(input.as_str()).ok_or_else(|| GraphError::DanglingInput {
                    layer: node.id.clone(),
                    input: input.clone(),
                })?;
                indegree[i] += 1;
                users[p].push(i);
            }
        }
        let mut ready: BTreeSet<usize> = (0..self.nodes.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &u in &users[i] {
                indegree[u] -= 1;
                if indegree[u] == 0 {
                    ready.insert(u);
                }
            }
        }
        if order.len() != self.nodes.len() {
            let stuck = (0..self.nodes.len()).find(|&i| indegree[i] > 0).unwrap();
            return Err(GraphError::Cycle(self.nodes[stuck].id.clone()));
        }
        Ok(order)
    }

    /// Nodes in topological order.
    pub fn sorted_nodes(&self) -> Result<Vec<&LayerNode>, GraphError> {
        Ok(self.topo_order()?.into_iter().map(|i| &self.nodes[i]).collect())
    }

    /// Checks structure and shapes, collecting every violation found.
    pub fn validate(&self) -> Result<(), Vec<GraphError>> {
        let mut errors = Vec::new();
        let mut seen = HashSet::new();
        for node in &self.nodes {
            if node.id == INPUT {
                errors.push(GraphError::ReservedId);
            } else if !seen.insert(node.id.as_str()) {
                errors.push(GraphError::DuplicateId(node.id.clone()));
            }
        }
        for node in &self.nodes {
            for input in &node.inputs {
                if input != INPUT && !seen.contains(input.as_str()) {
                    errors.push(GraphError::DanglingInput { layer: node.id.clone(), input: input.clone() });
                }
            }
        }
        for out in &self.outputs {
            if out != INPUT && !seen.contains(out.as_str()) {
                errors.push(GraphError::UnknownOutput(out.clone()));
            }
        }
        if !self.input_shape.is_valid() {
            errors.push(GraphError::InvalidSpec {
                layer: INPUT.into(),
                detail: format!("input shape {} has a zero dimension", self.input_shape),
            });
        }
        // Cycle detection only makes sense once references resolve.
        if errors.is_empty() {
            if let Err(e) = self.topo_order() {
                errors.push(e);
            }
        }
        if errors.is_empty() {
            let (_, shape_errors) = self.propagate_shapes();
            errors.extend(shape_errors);
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }

    /// Output shape of every node.
    pub fn infer_shapes(&self) -> Result<ShapeMap, GraphError> {
        self.topo_order()?;
        let (shapes, mut errors) = self.propagate_shapes();
        if errors.is_empty() {
            Ok(shapes)
        } else {
            Err(errors.swap_remove(0))
        }
    }

    fn propagate_shapes(&self) -> (ShapeMap, Vec<GraphError>) {
        let mut shapes = ShapeMap::new();
        let mut errors = Vec::new();
        shapes.insert(INPUT.to_string(), self.input_shape);
        let Ok(order) = self.topo_order() else {
            return (shapes, errors);
        };
        for i in order {
            let node = &self.nodes[i];
            let ins: Option<Vec<TensorShape>> =
                node.inputs.iter().map(|id| shapes.get(id).copied()).collect();
            // Upstream failure was already reported.
            let Some(ins) = ins else { continue };
            match node_output_shape(node, &ins) {
                Ok(s) => {
                    shapes.insert(node.id.clone(), s);
                }
                Err(e) => errors.push(e),
            }
        }
        (shapes, errors)
    }

    /// Receptive field of `layer_id` relative to the graph input. Where
    /// several paths reach a node, the larger extent is taken.
    pub fn receptive_field(&self, layer_id: &str) -> Result<ReceptiveField, GraphError> {
        if layer_id != INPUT && self.node(layer_id).is_none() {
            return Err(GraphError::UnknownLayer(layer_id.to_string()));
        }
        Ok(self.receptive_fields()?[layer_id])
    }

    /// Receptive field of every node.
    pub fn receptive_fields(&self) -> Result<HashMap<String, ReceptiveField>, GraphError> {
        let mut rf = HashMap::new();
        rf.insert(INPUT.to_string(), ReceptiveField { size_h: 1, size_w: 1, stride_h: 1, stride_w: 1 });
        for node in self.sorted_nodes()? {
            let mut acc: Option<ReceptiveField> = None;
            for input in &node.inputs {
                let r = rf[input];
                acc = Some(match acc {
                    None => r,
                    Some(a) => ReceptiveField {
                        size_h: a.size_h.max(r.size_h),
                        size_w: a.size_w.max(r.size_w),
                        stride_h: a.stride_h.max(r.stride_h),
                        stride_w: a.stride_w.max(r.stride_w),
                    },
                });
            }
            let base = acc.unwrap_or(rf[INPUT]);
            let window = match &node.op {
                Op::Conv(s) | Op::DepthwiseConv(s) => Some((s.effective_kernel(), s.stride)),
                Op::MaxPool(p) | Op::AvgPool(p) => Some((p.kernel, p.stride)),
                _ => None,
            };
            let out = match window {
                None => base,
                Some((extent, stride)) => ReceptiveField {
                    size_h: base.size_h + (extent.h - 1) * base.stride_h,
                    size_w: base.size_w + (extent.w - 1) * base.stride_w,
                    stride_h: base.stride_h * stride.h,
                    stride_w: base.stride_w * stride.w,
                },
            };
            rf.insert(node.id.clone(), out);
        }
        Ok(rf)
    }

    /// Convolutions whose output channels are tied together by elementwise
    /// additions, directly or through channel-wise ops (batch norm, relu,
    /// pooling, depthwise convolution) and chained additions.
    pub fn coupled_groups(&self) -> Vec<CoupledGroup> {
        let index = self.index();
        let Ok(order) = self.topo_order() else {
            return Vec::new();
        };
        let mut parent: HashMap<String, String> = HashMap::new();
        fn find(parent: &mut HashMap<String, String>, x: &str) -> String {
            let p = parent.get(x).cloned().unwrap_or_else(|| x.to_string());
            if p == x {
                return p;
            }
            let root = find(parent, &p);
            parent.insert(x.to_string(), root.clone());
            root
        }
        let mut pinned_roots: HashSet<String> = HashSet::new();
        let mut touched: Vec<String> = Vec::new();
        for &i in &order {
            let node = &self.nodes[i];
            if node.op != Op::EltwiseAdd {
                continue;
            }
            let roots = self.channel_roots_with(&index, &node.id);
            let convs: Vec<&str> = roots
                .iter()
                .filter_map(|r| match r {
                    ChannelRoot::Conv(id) => Some(id.as_str()),
                    ChannelRoot::Fixed(_) => None,
                })
                .collect();
            let pinned = roots.iter().any(|r| matches!(r, ChannelRoot::Fixed(_)));
            let Some(&first) = convs.first() else { continue };
            for &c in &convs {
                parent.entry(c.to_string()).or_insert_with(|| c.to_string());
                if !touched.iter().any(|t| t == c) {
                    touched.push(c.to_string());
                }
            }
            for &c in &convs[1..] {
                let a = find(&mut parent, first);
                let b = find(&mut parent, c);
                if a != b {
                    let a_pinned = pinned_roots.remove(&a);
                    let b_pinned = pinned_roots.remove(&b);
                    parent.insert(b.clone(), a.clone());
                    if a_pinned || b_pinned {
                        pinned_roots.insert(a);
                    }
                }
            }
            if pinned {
                let r = find(&mut parent, first);
                pinned_roots.insert(r);
            }
        }
        let position: HashMap<usize, usize> = order.iter().enumerate().map(|(p, &i)| (i, p)).collect();
        let mut groups: Vec<(String, Vec<String>)> = Vec::new();
        for id in touched {
            let root = find(&mut parent, &id);
            match groups.iter_mut().find(|(r, _)| *r == root) {
                Some((_, members)) => members.push(id),
                None => groups.push((root, vec![id])),
            }
        }
        let mut out: Vec<CoupledGroup> = groups
            .into_iter()
            .map(|(root, mut members)| {
                members.sort_by_key(|m| position[&index[m.as_str()]]);
                CoupledGroup { pinned: pinned_roots.contains(&root), member_layer_ids: members }
            })
            .collect();
        out.sort_by_key(|g| position[&index[g.member_layer_ids[0].as_str()]]);
        out
    }

    /// Producers that define the channel identity of `id`'s output.
    pub fn channel_roots(&self, id: &str) -> Vec<ChannelRoot> {
        self.channel_roots_with(&self.index(), id)
    }

    fn channel_roots_with(&self, index: &HashMap<&str, usize>, id: &str) -> Vec<ChannelRoot> {
        let mut out = Vec::new();
        let mut stack = vec![id.to_string()];
        let mut visited = HashSet::new();
        while let Some(cur) = stack.pop() {
            if !visited.insert(cur.clone()) {
                continue;
            }
            if cur == INPUT {
                out.push(ChannelRoot::Fixed(cur));
                continue;
            }
            let Some(&i) = index.get(cur.as_str()) else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Conv(_) => out.push(ChannelRoot::Conv(cur)),
                Op::EltwiseAdd => stack.extend(node.inputs.iter().rev().cloned()),
                op if op.is_channelwise() => stack.extend(node.inputs.iter().cloned()),
                _ => out.push(ChannelRoot::Fixed(cur)),
            }
        }
        out
    }
}

/// Where a tensor's channels originate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ChannelRoot {
    /// A regular convolution whose filters define the channels.
    Conv(String),
    /// The graph input or a concatenation.
    Fixed(String),
}

fn spatial_out(layer: &str, input: usize, pad: usize, extent: usize, stride: usize) -> Result<usize, GraphError> {
    let padded = input + 2 * pad;
    if padded < extent || stride == 0 {
        return Err(GraphError::NonPositiveOutput(layer.to_string()));
    }
    Ok((padded - extent) / stride + 1)
}

fn check_arity(node: &LayerNode, got: usize, ok: bool, expected: &'static str) -> Result<(), GraphError> {
    if ok {
        Ok(())
    } else {
        Err(GraphError::Arity { layer: node.id.clone(), expected, got })
    }
}

/// Output shape of `node` given its input shapes.
pub fn node_output_shape(node: &LayerNode, ins: &[TensorShape]) -> Result<TensorShape, GraphError> {
    let layer = node.id.as_str();
    let invalid = |detail: String| GraphError::InvalidSpec { layer: layer.to_string(), detail };
    match &node.op {
        Op::Conv(s) | Op::DepthwiseConv(s) => {
            check_arity(node, ins.len(), ins.len() == 1, "1")?;
            let x = ins[0];
            if s.out_channels == 0 || s.kernel_h == 0 || s.kernel_w == 0 {
                return Err(invalid("zero channels or kernel size".into()));
            }
            if s.stride.h == 0 || s.stride.w == 0 || s.dilation.h == 0 || s.dilation.w == 0 {
                return Err(invalid("stride and dilation must be >= 1".into()));
            }
            if s.groups == 0 || !x.c.is_multiple_of(s.groups) || s.out_channels % s.groups != 0 {
                return Err(GraphError::GroupMismatch {
                    layer: layer.to_string(),
                    detail: format!("groups {} must divide in {} and out {}", s.groups, x.c, s.out_channels),
                });
            }
            if matches!(node.op, Op::DepthwiseConv(_)) && (s.groups != x.c || s.out_channels != x.c) {
                return Err(GraphError::GroupMismatch {
                    layer: layer.to_string(),
                    detail: format!(
                        "depthwise needs groups = in = out, got groups {} in {} out {}",
                        s.groups, x.c, s.out_channels
                    ),
                });
            }
            let ext = s.effective_kernel();
            Ok(TensorShape {
                n: x.n,
                c: s.out_channels,
                h: spatial_out(layer, x.h, s.pad.h, ext.h, s.stride.h)?,
                w: spatial_out(layer, x.w, s.pad.w, ext.w, s.stride.w)?,
            })
        }
        Op::MaxPool(p) | Op::AvgPool(p) => {
            check_arity(node, ins.len(), ins.len() == 1, "1")?;
            let x = ins[0];
            if p.kernel.h == 0 || p.kernel.w == 0 {
                return Err(invalid("zero pooling window".into()));
            }
            if p.pad.h >= p.kernel.h || p.pad.w >= p.kernel.w {
                return Err(invalid("pooling pad must be smaller than the window".into()));
            }
            Ok(TensorShape {
                n: x.n,
                c: x.c,
                h: spatial_out(layer, x.h, p.pad.h, p.kernel.h, p.stride.h)?,
                w: spatial_out(layer, x.w, p.pad.w, p.kernel.w, p.stride.w)?,
            })
        }
        Op::BatchNorm(b) => {
            check_arity(node, ins.len(), ins.len() == 1, "1")?;
            if !(b.epsilon >= 0.0) {
                return Err(invalid(format!("epsilon {} must be non-negative", b.epsilon)));
            }
            Ok(ins[0])
        }
        Op::Relu | Op::Softmax => {
            check_arity(node, ins.len(), ins.len() == 1, "1")?;
            Ok(ins[0])
        }
        Op::EltwiseAdd => {
            check_arity(node, ins.len(), ins.len() >= 2, "at least 2")?;
            let first = ins[0];
            for s in &ins[1..] {
                if s.c != first.c {
                    return Err(GraphError::ChannelMismatch {
                        layer: layer.to_string(),
                        detail: format!("{first} vs {s}"),
                    });
                }
                if *s != first {
                    return Err(GraphError::ShapeMismatch {
                        layer: layer.to_string(),
                        detail: format!("{first} vs {s}"),
                    });
                }
            }
            Ok(first)
        }
        Op::Concat => {
            check_arity(node, ins.len(), !ins.is_empty(), "at least 1")?;
            let first = ins[0];
            let mut c = 0;
            for s in ins {
                if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                    return Err(GraphError::ShapeMismatch {
                        layer: layer.to_string(),
                        detail: format!("{first} vs {s}"),
                    });
                }
                c += s.c;
            }
            Ok(TensorShape { c, ..first })
        }
    }
}

/// Breadth-first set of nodes reachable downstream of `id` (excluding it).
pub fn downstream_of<'a>(graph: &'a Graph, id: &str) -> HashSet<&'a str> {
    let consumers = graph.consumers();
    let mut seen = HashSet::new();
    let mut queue: VecDeque<&str> = consumers.get(id).cloned().unwrap_or_default().into();
    while let Some(cur) = queue.pop_front() {
        if seen.insert(cur) {
            if let Some(next) = consumers.get(cur) {
                queue.extend(next.iter().copied());
            }
        }
    }
    seen
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(id: &str, input: &str, spec: ConvSpec) -> LayerNode {
        LayerNode::new(id, Op::Conv(spec), &[input])
    }

    #[test]
    fn conv_relu_chain_validates() {
        let g = Graph::new(
            TensorShape::new(1, 3, 8, 8),
            vec![conv("c", INPUT, ConvSpec::new(4, 3).pad(1)), LayerNode::new("r", Op::Relu, &["c"])],
            vec!["r".into()],
        );
        assert_eq!(g.validate(), Ok(()));
    }

    #[test]
    fn eltwise_channel_mismatch_is_reported() {
        let g = Graph::new(
            TensorShape::new(1, 3, 32, 40),
            vec![
                conv("a", INPUT, ConvSpec::new(64, 1)),
                conv("b", INPUT, ConvSpec::new(128, 1)),
                LayerNode::new("add", Op::EltwiseAdd, &["a", "b"]),
            ],
            vec!["add".into()],
        );
        let errs = g.validate().unwrap_err();
        assert_eq!(errs.len(), 1);
        assert!(matches!(&errs[0], GraphError::ChannelMismatch { layer, .. } if layer == "add"));
        assert!(errs[0].to_string().contains("channel mismatch"));
    }

    #[test]
    fn dangling_input_and_duplicates_all_reported() {
        let g = Graph::new(
            TensorShape::new(1, 3, 8, 8),
            vec![
                conv("c", "x", ConvSpec::new(4, 3)),
                conv("d", INPUT, ConvSpec::new(4, 3)),
                conv("d", INPUT, ConvSpec::new(4, 3)),
            ],
            vec!["nope".into()],
        );
        let errs = g.validate().unwrap_err();
        assert!(errs.contains(&GraphError::DanglingInput { layer: "c".into(), input: "x".into() }));
        assert!(errs.contains(&GraphError::DuplicateId("d".into())));
        assert!(errs.contains(&GraphError::UnknownOutput("nope".into())));
        assert!(errs.iter().any(|e| e.to_string().contains("dangling input")));
    }

    #[test]
    fn cycle_is_reported() {
        let g = Graph::new(
            TensorShape::new(1, 3, 8, 8),
            vec![LayerNode::new("a", Op::Relu, &["b"]), LayerNode::new("b", Op::Relu, &["a"])],
            vec![],
        );
        assert!(matches!(g.validate().unwrap_err()[0], GraphError::Cycle(_)));
    }

    #[test]
    fn group_mismatch_is_reported() {
        let g = Graph::new(
            TensorShape::new(1, 6, 8, 8),
            vec![conv("c", INPUT, ConvSpec::new(4, 3).groups(4))],
            vec![],
        );
        assert!(matches!(g.validate().unwrap_err()[0], GraphError::GroupMismatch { .. }));
    }

    #[test]
    fn stem_and_dilated_shapes() {
        let g = Graph::new(
            TensorShape::new(1, 3, 256, 320),
            vec![conv("conv1", INPUT, ConvSpec::new(64, 7).stride(2).pad(3))],
            vec![],
        );
        assert_eq!(g.infer_shapes().unwrap()["conv1"], TensorShape::new(1, 64, 128, 160));

        let g = Graph::new(
            TensorShape::new(1, 128, 32, 40),
            vec![conv("d", INPUT, ConvSpec::new(128, 3).pad(2).dilation(2))],
            vec![],
        );
        assert_eq!(g.infer_shapes().unwrap()["d"], TensorShape::new(1, 128, 32, 40));

        let g = Graph::new(
            TensorShape::new(1, 8, 5, 5),
            vec![conv("p", INPUT, ConvSpec::new(11, 1))],
            vec![],
        );
        assert_eq!(g.infer_shapes().unwrap()["p"], TensorShape::new(1, 11, 5, 5));
    }

    #[test]
    fn non_positive_output_names_layer() {
        let g = Graph::new(
            TensorShape::new(1, 3, 4, 4),
            vec![conv("big", INPUT, ConvSpec::new(2, 7))],
            vec![],
        );
        assert_eq!(g.infer_shapes(), Err(GraphError::NonPositiveOutput("big".into())));
    }

    #[test]
    fn concat_sums_channels() {
        let g = Graph::new(
            TensorShape::new(1, 3, 8, 8),
            vec![
                conv("a", INPUT, ConvSpec::new(2, 1)),
                conv("b", INPUT, ConvSpec::new(5, 3).pad(1)),
                LayerNode::new("cat", Op::Concat, &["a", "b"]),
            ],
            vec![],
        );
        assert_eq!(g.infer_shapes().unwrap()["cat"], TensorShape::new(1, 7, 8, 8));
    }

    #[test]
    fn receptive_field_composition() {
        let g = Graph::new(
            TensorShape::new(1, 1, 32, 32),
            vec![
                conv("a", INPUT, ConvSpec::new(1, 3).stride(2).pad(1)),
                conv("b", "a", ConvSpec::new(1, 3).pad(1)),
            ],
            vec![],
        );
        let rf = g.receptive_field("a").unwrap();
        assert_eq!((rf.size_h, rf.stride_h), (3, 2));
        let rf = g.receptive_field("b").unwrap();
        assert_eq!(rf, ReceptiveField { size_h: 7, size_w: 7, stride_h: 2, stride_w: 2 });
        assert_eq!(g.receptive_field("zzz"), Err(GraphError::UnknownLayer("zzz".into())));
    }

    #[test]
    fn plain_chain_has_no_coupling() {
        let g = Graph::new(
            TensorShape::new(1, 3, 8, 8),
            vec![conv("a", INPUT, ConvSpec::new(4, 3)), conv("b", "a", ConvSpec::new(4, 3))],
            vec![],
        );
        assert!(g.coupled_groups().is_empty());
    }

    #[test]
    fn projection_block_couples_branch_and_shortcut() {
        let g = Graph::new(
            TensorShape::new(1, 4, 8, 8),
            vec![
                conv("stem", INPUT, ConvSpec::new(4, 3).pad(1)),
                LayerNode::new("bn", Op::BatchNorm(BatchNormSpec::default()), &["stem"]),
                LayerNode::new("relu", Op::Relu, &["bn"]),
                conv("a", "relu", ConvSpec::new(8, 3).pad(1).stride(2)),
                LayerNode::new("a_relu", Op::Relu, &["a"]),
                conv("b", "a_relu", ConvSpec::new(8, 3).pad(1)),
                conv("sc", "relu", ConvSpec::new(8, 1).stride(2)),
                LayerNode::new("add", Op::EltwiseAdd, &["b", "sc"]),
            ],
            vec!["add".into()],
        );
        let groups = g.coupled_groups();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].member_layer_ids, vec!["b".to_string(), "sc".to_string()]);
        assert!(!groups[0].pinned);
    }

    #[test]
    fn identity_add_on_graph_input_is_pinned() {
        let g = Graph::new(
            TensorShape::new(1, 4, 8, 8),
            vec![
                conv("a", INPUT, ConvSpec::new(4, 3).pad(1)),
                LayerNode::new("add", Op::EltwiseAdd, &["a", INPUT]),
            ],
            vec!["add".into()],
        );
        let groups = g.coupled_groups();
        assert_eq!(groups.len(), 1);
        assert!(groups[0].pinned);
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let g = Graph::new(
            TensorShape::new(1, 3, 8, 8),
            vec![
                conv("c", INPUT, ConvSpec { stride: Pair::new(1, 2), ..ConvSpec::new(4, 3) }),
                LayerNode::new("bn", Op::BatchNorm(BatchNormSpec::default()), &["c"]),
                LayerNode::new("p", Op::MaxPool(PoolSpec::new(2, 2, 0)), &["bn"]),
                LayerNode::new("r", Op::Relu, &["p"]),
            ],
            vec!["r".into()],
        );
        let text = g.to_json();
        assert_eq!(Graph::from_json(&text).unwrap(), g);

        let bad = r#"{"input_shape":[1,3,8,8],"nodes":[],"outputs":[],"extra":1}"#;
        assert!(Graph::from_json(bad).is_err());
        let bad = r#"{"input_shape":[1,3,8,8],"nodes":[{"id":"r","kind":"relu","inputs":["input"],"spec":{"x":1}}],"outputs":[]}"#;
        assert!(Graph::from_json(bad).is_err());
        let bad = r#"{"input_shape":[1,3,8,8],"nodes":[{"id":"r","kind":"conv","inputs":["input"],"spec":{"out_channels":2,"kernel_h":1,"kernel_w":1,"bogus":0}}],"outputs":[]}"#;
        assert!(Graph::from_json(bad).is_err());
        let bad = r#"{"input_shape":[1,3,8,8],"nodes":[{"id":"r","kind":"gelu","inputs":["input"]}],"outputs":[]}"#;
        assert!(Graph::from_json(bad).is_err());
    }
}
