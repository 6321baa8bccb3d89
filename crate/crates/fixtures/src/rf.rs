use std::collections::{BTreeMap, HashMap};

use slimdet::executor::run_traced;
use slimdet::graph::{ConvSpec, Graph, LayerNode, Op, TensorShape, INPUT};
use slimdet::tensor::{Tensor, WeightStore};

const MAX_GROWTH: usize = 8;
const CHUNK: usize = 16;

/// Linear, one-channel copy of `graph`: batch norms, relus and softmaxes are
/// bypassed, max pools become average pools, every conv emits one channel
/// and a 1x1 conv folds each concat back to one channel. Weights are
/// positive constants, so an output changes exactly when a pixel it depends
/// on changes. Returns the copy and the map from original ids to copy ids.
fn unit_copy(graph: &Graph, h: usize, w: usize) -> (Graph, WeightStore, HashMap<String, String>) {
    let mut alias: HashMap<String, String> = HashMap::new();
    alias.insert(INPUT.to_string(), INPUT.to_string());
    let mut nodes: Vec<LayerNode> = Vec::new();
    let order = graph.sorted_nodes().expect("acyclic graph");
    for node in order {
        let ins: Vec<String> = node.inputs.iter().map(|i| alias[i].clone()).collect();
        let ins_ref: Vec<&str> = ins.iter().map(String::as_str).collect();
        match &node.op {
            Op::BatchNorm(_) | Op::Relu | Op::Softmax => {
                alias.insert(node.id.clone(), ins[0].clone());
            }
            Op::Conv(s) | Op::DepthwiseConv(s) => {
                let spec = ConvSpec { out_channels: 1, groups: 1, has_bias: false, ..*s };
                nodes.push(LayerNode::new(node.id.clone(), Op::Conv(spec), &ins_ref));
                alias.insert(node.id.clone(), node.id.clone());
            }
            Op::MaxPool(p) | Op::AvgPool(p) => {
                nodes.push(LayerNode::new(node.id.clone(), Op::AvgPool(*p), &ins_ref));
                alias.insert(node.id.clone(), node.id.clone());
            }
            Op::EltwiseAdd => {
                nodes.push(LayerNode::new(node.id.clone(), Op::EltwiseAdd, &ins_ref));
                alias.insert(node.id.clone(), node.id.clone());
            }
            Op::Concat => {
                nodes.push(LayerNode::new(node.id.clone(), Op::Concat, &ins_ref));
                let squeeze = format!("{}__unit", node.id);
                nodes.push(LayerNode::new(squeeze.clone(), Op::Conv(ConvSpec::new(1, 1)), &[node.id.as_str()]));
                alias.insert(node.id.clone(), squeeze);
            }
        }
    }
    let outputs: Vec<String> = nodes.last().map(|n| vec![n.id.clone()]).unwrap_or_default();
    let unit = Graph::new(TensorShape::new(1, 1, h, w), nodes, outputs);
    let shapes = unit.infer_shapes().expect("unit copy keeps valid shapes");
    let mut weights = WeightStore::new();
    for node in &unit.nodes {
        if let Op::Conv(s) = &node.op {
            let cin = shapes[&node.inputs[0]].c;
            let taps = cin * s.kernel_h * s.kernel_w;
            weights.insert(&node.id, "weight", Tensor::full(&[1, cin, s.kernel_h, s.kernel_w], 1.0 / taps as f32));
        }
    }
    (unit, weights, alias)
}

/// For the centre activation of every layer, the span of input rows (axis 0)
/// or columns (axis 1) whose perturbation changes it. `None` when a span
/// touches the input border.
fn probe_axis(graph: &Graph, h: usize, w: usize, axis: usize) -> Option<BTreeMap<String, usize>> {
    let (mut unit, weights, alias) = unit_copy(graph, h, w);
    let lines = if axis == 0 { h } else { w };
    let mut spans: HashMap<String, (usize, usize)> = HashMap::new();
    let mut start = 0;
    while start < lines {
        let n = CHUNK.min(lines - start);
        unit.input_shape.n = n;
        let mut input = Tensor::zeros(&[n, 1, h, w]);
        let data = input.data_mut();
        for b in 0..n {
            let line = start + b;
            for y in 0..h {
                for x in 0..w {
                    if (axis == 0 && y == line) || (axis == 1 && x == line) {
                        data[(b * h + y) * w + x] = 1.0;
                    }
                }
            }
        }
        let trace = run_traced(&unit, &weights, &input, true).expect("unit copy executes");
        for (id, t) in &trace.activations {
            let [_, _, oh, ow] = <[usize; 4]>::try_from(t.dims()).unwrap();
            let (cy, cx) = (oh / 2, ow / 2);
            for b in 0..n {
                if t.data()[(b * oh + cy) * ow + cx] != 0.0 {
                    let line = start + b;
                    let e = spans.entry(id.clone()).or_insert((line, line));
                    e.0 = e.0.min(line);
                    e.1 = e.1.max(line);
                }
            }
        }
        start += n;
    }
    let mut out = BTreeMap::new();
    for node in &graph.nodes {
        let id = &alias[&node.id];
        if id == INPUT {
            out.insert(node.id.clone(), 1);
            continue;
        }
        let (lo, hi) = spans.get(id).copied()?;
        if lo == 0 || hi == lines - 1 {
            return None;
        }
        out.insert(node.id.clone(), hi - lo + 1);
    }
    Some(out)
}

/// Receptive field `(height, width)` of every layer, measured by perturbing
/// one input row or column at a time and watching the centre activation.
/// The probe input starts at the graph's own size and doubles along an axis
/// while any span reaches the border.
pub fn perturb_rf(graph: &Graph) -> Result<BTreeMap<String, (usize, usize)>, String> {
    let base = graph.input_shape;
    let mut per_axis = Vec::new();
    for axis in 0..2 {
        let (mut h, mut w) = (base.h, base.w);
        let mut found = None;
        for _ in 0..=MAX_GROWTH {
            if let Some(spans) = probe_axis(graph, h, w, axis) {
                found = Some(spans);
                break;
            }
            if axis == 0 {
                h *= 2;
            } else {
                w *= 2;
            }
        }
        per_axis.push(found.ok_or_else(|| format!("receptive field along axis {axis} exceeds probe growth"))?);
    }
    Ok(per_axis[0].iter().map(|(id, &sh)| (id.clone(), (sh, per_axis[1][id]))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_conv() {
        let g = Graph::new(
            TensorShape::new(1, 3, 9, 9),
            vec![LayerNode::new("c", Op::Conv(ConvSpec::new(4, 3).pad(1)), &[INPUT])],
            vec!["c".into()],
        );
        assert_eq!(perturb_rf(&g).unwrap()["c"], (3, 3));
    }

    #[test]
    fn grows_small_inputs() {
        let g = Graph::new(
            TensorShape::new(1, 1, 4, 4),
            vec![
                LayerNode::new("a", Op::Conv(ConvSpec::new(1, 5).pad(2)), &[INPUT]),
                LayerNode::new("b", Op::Conv(ConvSpec::new(1, 3).pad(2).dilation(2)), &["a"]),
            ],
            vec!["b".into()],
        );
        assert_eq!(perturb_rf(&g).unwrap()["b"], (9, 9));
    }
}
