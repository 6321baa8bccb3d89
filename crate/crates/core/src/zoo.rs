//! Builders for the reference networks: a pre-activation ResNet10 with an
//! SSD head, and the dilated SSDR family derived from it.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{priors_per_cell, PriorConfig};
use crate::graph::{BatchNormSpec, ConvSpec, Graph, LayerNode, Op, PoolSpec, TensorShape, INPUT};
use crate::tensor::{Tensor, WeightStore};

/// Input geometry of every zoo model: one 256x320 RGB image.
pub const INPUT_SHAPE: TensorShape = TensorShape::new(1, 3, 256, 320);

/// Strided layers of the last two residual blocks; removing them turns the
/// ResNet10 trunk into the SSDR trunk.
pub const REDUCTION_LAYER_IDS: [&str; 4] = ["res3_conv_a", "res3_shortcut", "res4_conv_a", "res4_shortcut"];

const BN_EPS: f64 = 1e-5;
const CLASSES: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum ZooError {
    #[error("unknown model `{0}`; known: resnet10_ssd, resnet10_trunk, ssdr_1.5, ssdr_0.75, ssdr_0.47, ssdr_1.5_trunk, ssdr_0.75_trunk, ssdr_0.47_trunk")]
    UnknownModel(String),
    #[error("unknown SSDR variant `{0}`; known: 1.5, 0.75, 0.47")]
    UnknownVariant(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SsdrVariant {
    #[serde(rename = "1.5")]
    V1_5,
    #[serde(rename = "0.75")]
    V0_75,
    #[serde(rename = "0.47")]
    V0_47,
}

impl SsdrVariant {
    pub const ALL: [SsdrVariant; 3] = [SsdrVariant::V1_5, SsdrVariant::V0_75, SsdrVariant::V0_47];

    pub fn name(self) -> &'static str {
        match self {
            SsdrVariant::V1_5 => "1.5",
            SsdrVariant::V0_75 => "0.75",
            SsdrVariant::V0_47 => "0.47",
        }
    }

    /// Output channels of conv1, pool1, the four residual blocks, conv16_det
    /// and conv32_det.
    pub fn channel_plan(self) -> [usize; 8] {
        let (a, b) = match self {
            SsdrVariant::V1_5 => (64, 128),
            SsdrVariant::V0_75 => (49, 76),
            SsdrVariant::V0_47 => (41, 49),
        };
        [a, a, a, a, b, b, b, b]
    }
}

impl fmt::Display for SsdrVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SsdrVariant {
    type Err = ZooError;

    fn from_str(s: &str) -> Result<Self, ZooError> {
        SsdrVariant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| ZooError::UnknownVariant(s.to_string()))
    }
}

struct Builder {
    nodes: Vec<LayerNode>,
}

impl Builder {
    fn push(&mut self, id: &str, op: Op, inputs: &[&str]) -> String {
        self.nodes.push(LayerNode::new(id, op, inputs));
        id.to_string()
    }

    fn bn_relu(&mut self, bn: &str, relu: &str, input: &str) -> String {
        self.push(bn, Op::BatchNorm(BatchNormSpec { epsilon: BN_EPS }), &[input]);
        self.push(relu, Op::Relu, &[bn])
    }

    /// Pre-activation block: bn, relu, conv_a, bn, relu, conv_b, plus an
    /// identity or 1x1 projection shortcut taken after the first relu.
    #[allow(clippy::too_many_arguments)]
    fn res_block(&mut self, name: &str, input: &str, mid: usize, out: usize, stride: usize, dil: (usize, usize), project: bool) -> String {
        let relu1 = self.bn_relu(&format!("{name}_bn1"), &format!("{name}_relu1"), input);
        let a = self.push(
            &format!("{name}_conv_a"),
            Op::Conv(ConvSpec::new(mid, 3).stride(stride).pad(dil.0).dilation(dil.0)),
            &[&relu1],
        );
        let relu2 = self.bn_relu(&format!("{name}_bn2"), &format!("{name}_relu2"), &a);
        let b = self.push(&format!("{name}_conv_b"), Op::Conv(ConvSpec::new(out, 3).pad(dil.1).dilation(dil.1)), &[&relu2]);
        let short = if project {
            self.push(&format!("{name}_shortcut"), Op::Conv(ConvSpec::new(out, 1).stride(stride)), &[&relu1])
        } else {
            input.to_string()
        };
        self.push(&format!("{name}_add"), Op::EltwiseAdd, &[&b, &short])
    }

    fn stem(&mut self, c: usize) -> String {
        self.push("conv1", Op::Conv(ConvSpec::new(c, 7).stride(2).pad(3)), &[INPUT]);
        let r = self.bn_relu("conv1_bn", "conv1_relu", "conv1");
        self.push("pool1", Op::MaxPool(PoolSpec::new(3, 2, 1)), &[&r])
    }

    fn heads(&mut self, sources: &[String], config: &PriorConfig) -> Vec<String> {
        let mut outputs = Vec::new();
        for (l, (src, level)) in sources.iter().zip(&config.levels).enumerate() {
            let p = priors_per_cell(level);
            let cls = format!("head{}_cls", l + 1);
            let loc = format!("head{}_loc", l + 1);
            self.push(&cls, Op::Conv(ConvSpec::new(p * CLASSES, 3).pad(1).bias(true)), &[src]);
            self.push(&loc, Op::Conv(ConvSpec::new(p * 4, 3).pad(1).bias(true)), &[src]);
            outputs.extend([cls, loc]);
        }
        outputs
    }
}

/// Residual trunk channels: (block mid, block out) for res1..res4.
type TrunkPlan = [(usize, usize); 4];

fn trunk(b: &mut Builder, stem: usize, plan: TrunkPlan, strides: [usize; 4], dils: [(usize, usize); 4]) -> String {
    let mut x = b.stem(stem);
    for (i, ((mid, out), (stride, dil))) in plan.iter().zip(strides.iter().zip(dils)).enumerate() {
        // Only the first block keeps an identity shortcut.
        x = b.res_block(&format!("res{}", i + 1), &x, *mid, *out, *stride, dil, i > 0);
    }
    b.bn_relu("post_bn", "post_relu", &x)
}

const RESNET_PLAN: TrunkPlan = [(64, 64), (128, 128), (256, 256), (512, 256)];

/// Pre-activation ResNet10 feature extractor ending at `post_relu`
/// (8x10 for a 256x320 input).
pub fn build_resnet10_trunk_graph() -> Graph {
    let mut b = Builder { nodes: Vec::new() };
    let out = trunk(&mut b, 64, RESNET_PLAN, [1, 2, 2, 2], [(1, 1); 4]);
    Graph::new(INPUT_SHAPE, b.nodes, vec![out])
}

/// ResNet10 trunk with three SSD head levels reading the 32x40, 16x20 and
/// 8x10 activations.
pub fn build_resnet10_ssd_graph() -> Graph {
    let mut b = Builder { nodes: Vec::new() };
    let last = trunk(&mut b, 64, RESNET_PLAN, [1, 2, 2, 2], [(1, 1); 4]);
    let sources = ["res3_relu1".to_string(), "res4_relu1".to_string(), last];
    let outputs = b.heads(&sources, &PriorConfig::three_level_default());
    Graph::new(INPUT_SHAPE, b.nodes, outputs)
}

fn ssdr_trunk(b: &mut Builder, variant: SsdrVariant) -> String {
    let p = variant.channel_plan();
    trunk(b, p[0], [(p[2], p[2]), (p[3], p[3]), (p[4], p[4]), (p[5], p[5])], [1, 2, 1, 1], [(1, 1), (1, 1), (1, 2), (2, 4)])
}

/// SSDR feature extractor ending at `post_relu` (32x40).
pub fn build_ssdr_trunk_graph(variant: SsdrVariant) -> Graph {
    let mut b = Builder { nodes: Vec::new() };
    let out = ssdr_trunk(&mut b, variant);
    Graph::new(INPUT_SHAPE, b.nodes, vec![out])
}

/// SSDR: dilated trunk at 32x40, two strided detection convs down to 16x20
/// and 8x10, and SSD heads on all three.
pub fn build_ssdr_graph(variant: SsdrVariant) -> Graph {
    let p = variant.channel_plan();
    let mut b = Builder { nodes: Vec::new() };
    let t = ssdr_trunk(&mut b, variant);
    b.push("conv16_det", Op::Conv(ConvSpec::new(p[6], 3).stride(2).pad(1)), &[&t]);
    let c16 = b.bn_relu("conv16_bn", "conv16_relu", "conv16_det");
    b.push("conv32_det", Op::Conv(ConvSpec::new(p[7], 3).stride(2).pad(1)), &[&c16]);
    let c32 = b.bn_relu("conv32_bn", "conv32_relu", "conv32_det");
    let outputs = b.heads(&[t, c16, c32], &PriorConfig::three_level_default());
    Graph::new(INPUT_SHAPE, b.nodes, outputs)
}

pub fn build_resnet10_ssd(seed: u64) -> (Graph, WeightStore) {
    let g = build_resnet10_ssd_graph();
    let w = init_weights(&g, seed, InitScheme::HeNormal);
    (g, w)
}

pub fn build_ssdr(variant: SsdrVariant, seed: u64) -> (Graph, WeightStore) {
    let g = build_ssdr_graph(variant);
    let w = init_weights(&g, seed, InitScheme::HeNormal);
    (g, w)
}

pub const MODEL_NAMES: [&str; 8] =
    ["resnet10_ssd", "resnet10_trunk", "ssdr_1.5", "ssdr_0.75", "ssdr_0.47", "ssdr_1.5_trunk", "ssdr_0.75_trunk", "ssdr_0.47_trunk"];

/// Graph of a zoo model by name.
pub fn graph_by_name(name: &str) -> Result<Graph, ZooError> {
    let unknown = || ZooError::UnknownModel(name.to_string());
    match name {
        "resnet10_ssd" => Ok(build_resnet10_ssd_graph()),
        "resnet10_trunk" => Ok(build_resnet10_trunk_graph()),
        _ => {
            let rest = name.strip_prefix("ssdr_").ok_or_else(unknown)?;
            match rest.strip_suffix("_trunk") {
                Some(v) => Ok(build_ssdr_trunk_graph(v.parse().map_err(|_| unknown())?)),
                None => Ok(build_ssdr_graph(rest.parse().map_err(|_| unknown())?)),
            }
        }
    }
}

pub fn build_by_name(name: &str, seed: u64, scheme: InitScheme) -> Result<(Graph, WeightStore), ZooError> {
    let g = graph_by_name(name)?;
    let w = init_weights(&g, seed, scheme);
    Ok((g, w))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Normal filters with standard deviation `sqrt(2 / fan_in)`, small
    /// normal biases, and batch norms that compute the identity.
    #[default]
    HeNormal,
    /// As `HeNormal`, but batch norms get random statistics and affine terms.
    HeNormalRandomBn,
}

/// Deterministic weights for every conv and batch-norm layer, drawn from one
/// generator in node order.
///
/// # Panics
/// If the graph's shapes cannot be inferred.
pub fn init_weights(graph: &Graph, seed: u64, scheme: InitScheme) -> WeightStore {
    let shapes = graph.infer_shapes().expect("zoo init needs a valid graph");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let small = Normal::new(0.0, 0.1).unwrap();
    let mut w = WeightStore::new();
    for node in &graph.nodes {
        let in_c = node.inputs.first().map_or(0, |i| shapes[i.as_str()].c);
        match &node.op {
            Op::Conv(s) | Op::DepthwiseConv(s) => {
                let per_group = in_c / s.groups.max(1);
                let fan_in = (per_group * s.kernel_h * s.kernel_w).max(1);
                let he = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                let dims = vec![s.out_channels, per_group, s.kernel_h, s.kernel_w];
                let n: usize = dims.iter().product();
                let data = (0..n).map(|_| he.sample(&mut rng) as f32).collect();
                w.insert(&node.id, "weight", Tensor::new(dims, data).expect("sized"));
                if s.has_bias {
                    let bias = (0..s.out_channels).map(|_| small.sample(&mut rng) as f32).collect();
                    w.insert(&node.id, "bias", Tensor::new(vec![s.out_channels], bias).expect("sized"));
                }
            }
            Op::BatchNorm(spec) => {
                let c = shapes[&node.id].c;
                let params: [(&str, Vec<f32>); 4] = match scheme {
                    InitScheme::HeNormal => [
                        ("mean", vec![0.0; c]),
                        // var + eps == 1 exactly, so the layer is the identity.
                        ("variance", vec![(1.0 - spec.epsilon) as f32; c]),
                        ("gamma", vec![1.0; c]),
                        ("beta", vec![0.0; c]),
                    ],
                    InitScheme::HeNormalRandomBn => [
                        ("mean", (0..c).map(|_| small.sample(&mut rng) as f32).collect()),
                        ("variance", (0..c).map(|_| rng.random_range(0.5..1.5)).collect()),
                        ("gamma", (0..c).map(|_| rng.random_range(0.5..1.5)).collect()),
                        ("beta", (0..c).map(|_| small.sample(&mut rng) as f32).collect()),
                    ],
                };
                for (name, v) in params {
                    w.insert(&node.id, name, Tensor::new(vec![c], v).expect("sized"));
                }
            }
            _ => {}
        }
    }
    w
}

/// Sets `out_channels` of the named conv layers (and depthwise groups).
pub fn with_channels(graph: &Graph, channels: &BTreeMap<String, usize>) -> Graph {
    let mut g = graph.clone();
    for node in &mut g.nodes {
        if let (Some(&c), Some(spec)) = (channels.get(&node.id), node.op.conv_spec_mut()) {
            spec.out_channels = c;
        }
    }
    g
}

/// Per-conv channel counts that turn the rewritten ResNet10 trunk into the
/// SSDR trunk of `variant`.
pub fn trunk_channel_plan(variant: SsdrVariant) -> BTreeMap<String, usize> {
    let p = variant.channel_plan();
    let mut m = BTreeMap::from([("conv1".to_string(), p[0])]);
    for (i, c) in [p[2], p[3], p[4], p[5]].into_iter().enumerate() {
        for part in ["conv_a", "conv_b", "shortcut"] {
            m.insert(format!("res{}_{part}", i + 1), c);
        }
    }
    m.remove("res1_shortcut");
    m
}

/// First differing node between two graphs, comparing ids, kinds, inputs and
/// specs; `None` when structurally identical.
pub fn structural_diff(a: &Graph, b: &Graph) -> Option<String> {
    if a.input_shape != b.input_shape {
        return Some(format!("input shapes {} vs {}", a.input_shape, b.input_shape));
    }
    if a.outputs != b.outputs {
        return Some(format!("outputs {:?} vs {:?}", a.outputs, b.outputs));
    }
    if a.nodes.len() != b.nodes.len() {
        return Some(format!("{} vs {} nodes", a.nodes.len(), b.nodes.len()));
    }
    a.nodes.iter().zip(&b.nodes).find(|(x, y)| x != y).map(|(x, y)| format!("{x:?} vs {y:?}"))
}

/// Activation ids at each stage boundary of the SSDR network: conv1,
/// pool1, the four residual blocks, conv16_det and conv32_det.
pub const SSDR_ROW_IDS: [&str; 8] =
    ["conv1", "pool1", "res1_add", "res2_add", "res3_add", "res4_add", "conv16_det", "conv32_det"];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost;

    #[test]
    fn ssdr_rows_have_expected_sizes() {
        let g = build_ssdr_graph(SsdrVariant::V1_5);
        g.validate().unwrap();
        let s = g.infer_shapes().unwrap();
        let dims: Vec<(usize, usize)> = SSDR_ROW_IDS.iter().map(|id| (s[*id].h, s[*id].w)).collect();
        assert_eq!(dims, vec![(128, 160), (64, 80), (64, 80), (32, 40), (32, 40), (32, 40), (16, 20), (8, 10)]);
        let chans: Vec<usize> = SSDR_ROW_IDS.iter().map(|id| s[*id].c).collect();
        assert_eq!(chans, SsdrVariant::V1_5.channel_plan().to_vec());
    }

    #[test]
    fn resnet_block_outputs() {
        let g = build_resnet10_ssd_graph();
        let s = g.infer_shapes().unwrap();
        let dims: Vec<(usize, usize, usize)> =
            (1..=4).map(|i| s[&format!("res{i}_add")]).map(|t| (t.c, t.h, t.w)).collect();
        assert_eq!(dims, vec![(64, 64, 80), (128, 32, 40), (256, 16, 20), (256, 8, 10)]);
        assert_eq!(g.outputs.len(), 6);
    }

    #[test]
    fn ssdr_cost_is_near_budget() {
        let r = cost::report(&build_ssdr_graph(SsdrVariant::V1_5)).unwrap();
        assert!((r.total_macs as f64 / 1.5e9 - 1.0).abs() < 0.1, "{}", r.total_macs);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("0.75".parse::<SsdrVariant>().unwrap(), SsdrVariant::V0_75);
        assert!("2".parse::<SsdrVariant>().is_err());
        assert!(graph_by_name("ssdr_9").is_err());
        assert!(graph_by_name("ssdr_0.47_trunk").is_ok());
    }

    #[test]
    fn init_is_deterministic_and_identity_bn() {
        let g = build_ssdr_graph(SsdrVariant::V0_47);
        let a = init_weights(&g, 3, InitScheme::HeNormal);
        assert_eq!(a, init_weights(&g, 3, InitScheme::HeNormal));
        assert_ne!(a, init_weights(&g, 4, InitScheme::HeNormal));
        let var = a.get("conv1_bn", "variance").unwrap().data()[0] as f64;
        assert_eq!((var + BN_EPS).sqrt() as f32, 1.0);
    }
}
