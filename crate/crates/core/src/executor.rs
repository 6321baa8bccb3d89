//! Reference forward execution.
//!
//! Straightforward loops with `f64` accumulation, rounded to `f32` per
//! output. This is the numerical oracle that every graph transform is
//! checked against, so clarity beats speed here.

use std::collections::HashMap;

use indexmap::IndexMap;
use thiserror::Error;

use crate::graph::{ConvSpec, Graph, GraphError, Op, PoolSpec, TensorShape, INPUT};
use crate::tensor::{Tensor, WeightStore};

#[derive(Debug, Error, PartialEq)]
pub enum ExecError {
    #[error("invalid graph: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Graph(Vec<GraphError>),
    #[error("layer `{layer}`: missing weight `{name}`")]
    MissingWeight { layer: String, name: String },
    #[error("layer `{layer}`: weight shape mismatch: {detail}")]
    WeightShape { layer: String, detail: String },
    #[error("layer `{layer}`: {detail}")]
    Shape { layer: String, detail: String },
    #[error("input shape {got:?} does not match graph input {expected}")]
    InputShape { expected: TensorShape, got: Vec<usize> },
    #[error("layer `{layer}`: non-positive variance + epsilon at channel {channel}")]
    NonPositiveVariance { layer: String, channel: usize },
}

/// Per-run operation counts gathered by [`run_counted`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    /// Multiply-accumulates issued by convolutions and batch norm, counting
    /// taps that land in zero padding.
    pub macs: u64,
}

fn shape_err(layer: &str, detail: impl Into<String>) -> ExecError {
    ExecError::Shape { layer: layer.to_string(), detail: detail.into() }
}

/// Grouped, strided, dilated 2-D convolution.
pub fn conv2d(input: &Tensor, spec: &ConvSpec, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor, ExecError> {
    conv2d_impl("conv", input, spec, weight, bias, &mut OpCounter::default())
}

fn check_conv_weights(
    layer: &str,
    x: TensorShape,
    spec: &ConvSpec,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<(), ExecError> {
    if spec.groups == 0 || !x.c.is_multiple_of(spec.groups) || !spec.out_channels.is_multiple_of(spec.groups) {
        return Err(shape_err(
            layer,
            format!("groups {} must divide in {} and out {}", spec.groups, x.c, spec.out_channels),
        ));
    }
    let expected = [spec.out_channels, x.c / spec.groups, spec.kernel_h, spec.kernel_w];
    if weight.dims() != expected {
        return Err(ExecError::WeightShape {
            layer: layer.to_string(),
            detail: format!("weight {:?}, expected {:?}", weight.dims(), expected),
        });
    }
    if let Some(b) = bias {
        if b.dims() != [spec.out_channels] {
            return Err(ExecError::WeightShape {
                layer: layer.to_string(),
                detail: format!("bias {:?}, expected [{}]", b.dims(), spec.out_channels),
            });
        }
    }
    Ok(())
}

fn out_dim(input: usize, pad: usize, extent: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= extent && stride > 0).then(|| (padded - extent) / stride + 1)
}

/// Range of output positions `o` for which `o * stride + offset - pad` lies
/// in `[0, len)`.
fn valid_range(out_len: usize, stride: usize, offset: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = if offset >= pad { 0 } else { (pad - offset).div_ceil(stride) };
    // Largest o with o*stride + offset - pad <= len - 1.
    let limit = len + pad;
    let hi = if offset >= limit { 0 } else { (limit - offset - 1) / stride + 1 };
    (lo.min(out_len), hi.min(out_len).max(lo.min(out_len)))
}

fn conv2d_impl(
    layer: &str,
    input: &Tensor,
    spec: &ConvSpec,
    weight: &Tensor,
    bias: Option<&Tensor>,
    counter: &mut OpCounter,
) -> Result<Tensor, ExecError> {
    let x = input.shape4().map_err(|e| shape_err(layer, e.to_string()))?;
    check_conv_weights(layer, x, spec, weight, bias)?;
    let ext = spec.effective_kernel();
    let (Some(oh), Some(ow)) = (
        out_dim(x.h, spec.pad.h, ext.h, spec.stride.h),
        out_dim(x.w, spec.pad.w, ext.w, spec.stride.w),
    ) else {
        return Err(shape_err(layer, "non-positive output dimension"));
    };
    let cin_g = x.c / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let (sh, sw) = (spec.stride.h, spec.stride.w);
    let (dh, dw) = (spec.dilation.h, spec.dilation.w);
    let (ph, pw) = (spec.pad.h, spec.pad.w);
    let plane_in = x.h * x.w;
    let plane_out = oh * ow;
    let wdata = weight.data();
    let idata = input.data();
    let mut out = vec![0f32; x.n * spec.out_channels * plane_out];
    let mut acc = vec![0f64; plane_out];

    for n in 0..x.n {
        for o in 0..spec.out_channels {
            let g = o / cout_g;
            let b = bias.map_or(0.0, |b| b.data()[o] as f64);
            acc.iter_mut().for_each(|a| *a = b);
            for c in 0..cin_g {
                let in_plane = &idata[(n * x.c + g * cin_g + c) * plane_in..][..plane_in];
                for i in 0..kh {
                    let (y0, y1) = valid_range(oh, sh, i * dh, ph, x.h);
                    for j in 0..kw {
                        let wv = wdata[((o * cin_g + c) * kh + i) * kw + j] as f64;
                        counter.macs += plane_out as u64;
                        let (x0, x1) = valid_range(ow, sw, j * dw, pw, x.w);
                        for y in y0..y1 {
                            let iy = y * sh + i * dh - ph;
                            let row = &in_plane[iy * x.w..][..x.w];
                            let acc_row = &mut acc[y * ow..][..ow];
                            for xo in x0..x1 {
                                acc_row[xo] += wv * row[xo * sw + j * dw - pw] as f64;
                            }
                        }
                    }
                }
            }
            let dst = &mut out[(n * spec.out_channels + o) * plane_out..][..plane_out];
            for (d, a) in dst.iter_mut().zip(&acc) {
                *d = *a as f32;
            }
        }
    }
    Ok(Tensor::new(vec![x.n, spec.out_channels, oh, ow], out).expect("output length matches dims"))
}

/// Per-channel spatial convolution (`groups = in = out`).
pub fn depthwise_conv2d(
    input: &Tensor,
    spec: &ConvSpec,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor, ExecError> {
    depthwise_impl("depthwise_conv", input, spec, weight, bias, &mut OpCounter::default())
}

fn depthwise_impl(
    layer: &str,
    input: &Tensor,
    spec: &ConvSpec,
    weight: &Tensor,
    bias: Option<&Tensor>,
    counter: &mut OpCounter,
) -> Result<Tensor, ExecError> {
    let x = input.shape4().map_err(|e| shape_err(layer, e.to_string()))?;
    if spec.groups != x.c || spec.out_channels != x.c {
        return Err(shape_err(
            layer,
            format!("depthwise needs groups = in = out, got groups {} in {} out {}", spec.groups, x.c, spec.out_channels),
        ));
    }
    check_conv_weights(layer, x, spec, weight, bias)?;
    let ext = spec.effective_kernel();
    let (Some(oh), Some(ow)) = (
        out_dim(x.h, spec.pad.h, ext.h, spec.stride.h),
        out_dim(x.w, spec.pad.w, ext.w, spec.stride.w),
    ) else {
        return Err(shape_err(layer, "non-positive output dimension"));
    };
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let mut out = vec![0f32; x.n * x.c * oh * ow];
    for n in 0..x.n {
        for c in 0..x.c {
            let plane = &input.data()[(n * x.c + c) * x.h * x.w..][..x.h * x.w];
            let taps = &weight.data()[c * kh * kw..][..kh * kw];
            let b = bias.map_or(0.0, |b| b.data()[c] as f64);
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b;
                    for i in 0..kh {
                        let iy = (y * spec.stride.h + i * spec.dilation.h) as isize - spec.pad.h as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for j in 0..kw {
                            let ix = (xo * spec.stride.w + j * spec.dilation.w) as isize - spec.pad.w as isize;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            acc += taps[i * kw + j] as f64 * plane[iy as usize * x.w + ix as usize] as f64;
                        }
                    }
                    out[((n * x.c + c) * oh + y) * ow + xo] = acc as f32;
                }
            }
        }
    }
    counter.macs += (x.n * x.c * oh * ow * kh * kw) as u64;
    Ok(Tensor::new(vec![x.n, x.c, oh, ow], out).expect("output length matches dims"))
}

/// Inference-mode batch normalisation parameters, one value per channel.
#[derive(Clone, Copy, Debug)]
pub struct BnParams<'a> {
    pub mean: &'a [f32],
    pub variance: &'a [f32],
    pub gamma: &'a [f32],
    pub beta: &'a [f32],
}

/// `gamma * (x - mean) / sqrt(variance + epsilon) + beta`, per channel.
pub fn batch_norm(input: &Tensor, params: BnParams<'_>, epsilon: f64) -> Result<Tensor, ExecError> {
    batch_norm_impl("batch_norm", input, params, epsilon, &mut OpCounter::default())
}

fn batch_norm_impl(
    layer: &str,
    input: &Tensor,
    p: BnParams<'_>,
    epsilon: f64,
    counter: &mut OpCounter,
) -> Result<Tensor, ExecError> {
    let x = input.shape4().map_err(|e| shape_err(layer, e.to_string()))?;
    for (name, v) in [("mean", p.mean), ("variance", p.variance), ("gamma", p.gamma), ("beta", p.beta)] {
        if v.len() != x.c {
            return Err(ExecError::WeightShape {
                layer: layer.to_string(),
                detail: format!("{name} has {} entries for {} channels", v.len(), x.c),
            });
        }
    }
    let plane = x.h * x.w;
    let mut out = input.clone();
    for c in 0..x.c {
        let denom = p.variance[c] as f64 + epsilon;
        if !(denom > 0.0) {
            return Err(ExecError::NonPositiveVariance { layer: layer.to_string(), channel: c });
        }
        let scale = p.gamma[c] as f64 / denom.sqrt();
        let (mean, beta) = (p.mean[c] as f64, p.beta[c] as f64);
        for n in 0..x.n {
            for v in &mut out.data_mut()[(n * x.c + c) * plane..][..plane] {
                *v = (scale * (*v as f64 - mean) + beta) as f32;
            }
        }
    }
    counter.macs += 2 * x.numel() as u64;
    Ok(out)
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Pooling over in-bounds taps only: max ignores padding, average divides by
/// the number of in-bounds taps.
pub fn pool2d(input: &Tensor, spec: &PoolSpec, max: bool) -> Result<Tensor, ExecError> {
    pool_impl("pool", input, spec, max)
}

fn pool_impl(layer: &str, input: &Tensor, spec: &PoolSpec, max: bool) -> Result<Tensor, ExecError> {
    let x = input.shape4().map_err(|e| shape_err(layer, e.to_string()))?;
    let (Some(oh), Some(ow)) = (
        out_dim(x.h, spec.pad.h, spec.kernel.h, spec.stride.h),
        out_dim(x.w, spec.pad.w, spec.kernel.w, spec.stride.w),
    ) else {
        return Err(shape_err(layer, "non-positive output dimension"));
    };
    let mut out = vec![0f32; x.n * x.c * oh * ow];
    for nc in 0..x.n * x.c {
        let plane = &input.data()[nc * x.h * x.w..][..x.h * x.w];
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut sum = 0f64;
                let mut count = 0usize;
                for i in 0..spec.kernel.h {
                    let iy = (y * spec.stride.h + i) as isize - spec.pad.h as isize;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    for j in 0..spec.kernel.w {
                        let ix = (xo * spec.stride.w + j) as isize - spec.pad.w as isize;
                        if ix < 0 || ix >= x.w as isize {
                            continue;
                        }
                        let v = plane[iy as usize * x.w + ix as usize];
                        best = best.max(v);
                        sum += v as f64;
                        count += 1;
                    }
                }
                out[(nc * oh + y) * ow + xo] = match (max, count) {
                    (_, 0) => 0.0,
                    (true, _) => best,
                    (false, _) => (sum / count as f64) as f32,
                };
            }
        }
    }
    Ok(Tensor::new(vec![x.n, x.c, oh, ow], out).expect("output length matches dims"))
}

/// Softmax across the channel axis at every `(n, y, x)`.
pub fn softmax_channels(input: &Tensor) -> Result<Tensor, ExecError> {
    let x = input.shape4().map_err(|e| shape_err("softmax", e.to_string()))?;
    let plane = x.h * x.w;
    let mut out = input.clone();
    let data = out.data_mut();
    for n in 0..x.n {
        for p in 0..plane {
            let idx = |c: usize| (n * x.c + c) * plane + p;
            let m = (0..x.c).map(|c| data[idx(c)]).fold(f32::NEG_INFINITY, f32::max) as f64;
            let total: f64 = (0..x.c).map(|c| (data[idx(c)] as f64 - m).exp()).sum();
            for c in 0..x.c {
                data[idx(c)] = ((data[idx(c)] as f64 - m).exp() / total) as f32;
            }
        }
    }
    Ok(out)
}

fn eltwise_add(layer: &str, inputs: &[&Tensor]) -> Result<Tensor, ExecError> {
    let mut acc: Vec<f64> = inputs[0].data().iter().map(|&v| v as f64).collect();
    for t in &inputs[1..] {
        if t.dims() != inputs[0].dims() {
            return Err(shape_err(layer, format!("eltwise inputs {:?} vs {:?}", inputs[0].dims(), t.dims())));
        }
        acc.iter_mut().zip(t.data()).for_each(|(a, &v)| *a += v as f64);
    }
    Ok(Tensor::new(inputs[0].dims().to_vec(), acc.into_iter().map(|v| v as f32).collect())
        .expect("same length as input"))
}

fn concat(layer: &str, inputs: &[&Tensor]) -> Result<Tensor, ExecError> {
    let shapes: Vec<TensorShape> = inputs
        .iter()
        .map(|t| t.shape4().map_err(|e| shape_err(layer, e.to_string())))
        .collect::<Result<_, _>>()?;
    let first = shapes[0];
    if shapes.iter().any(|s| (s.n, s.h, s.w) != (first.n, first.h, first.w)) {
        return Err(shape_err(layer, "concat inputs disagree on n, h or w"));
    }
    let c_total: usize = shapes.iter().map(|s| s.c).sum();
    let plane = first.h * first.w;
    let mut data = Vec::with_capacity(first.n * c_total * plane);
    for n in 0..first.n {
        for (t, s) in inputs.iter().zip(&shapes) {
            data.extend_from_slice(&t.data()[n * s.c * plane..][..s.c * plane]);
        }
    }
    Ok(Tensor::new(vec![first.n, c_total, first.h, first.w], data).expect("length matches dims"))
}

fn weight<'a>(weights: &'a WeightStore, layer: &str, name: &str) -> Result<&'a Tensor, ExecError> {
    weights
        .get(layer, name)
        .ok_or_else(|| ExecError::MissingWeight { layer: layer.to_string(), name: name.to_string() })
}

fn execute_node(
    graph_node: &crate::graph::LayerNode,
    inputs: &[&Tensor],
    weights: &WeightStore,
    counter: &mut OpCounter,
) -> Result<Tensor, ExecError> {
    let id = graph_node.id.as_str();
    match &graph_node.op {
        Op::Conv(spec) | Op::DepthwiseConv(spec) => {
            let w = weight(weights, id, "weight")?;
            let b = if spec.has_bias { Some(weight(weights, id, "bias")?) } else { None };
            if matches!(graph_node.op, Op::DepthwiseConv(_)) {
                depthwise_impl(id, inputs[0], spec, w, b, counter)
            } else {
                conv2d_impl(id, inputs[0], spec, w, b, counter)
            }
        }
        Op::BatchNorm(spec) => {
            let p = BnParams {
                mean: weight(weights, id, "mean")?.data(),
                variance: weight(weights, id, "variance")?.data(),
                gamma: weight(weights, id, "gamma")?.data(),
                beta: weight(weights, id, "beta")?.data(),
            };
            batch_norm_impl(id, inputs[0], p, spec.epsilon, counter)
        }
        Op::Relu => Ok(relu(inputs[0])),
        Op::MaxPool(p) => pool_impl(id, inputs[0], p, true),
        Op::AvgPool(p) => pool_impl(id, inputs[0], p, false),
        Op::EltwiseAdd => eltwise_add(id, inputs),
        Op::Concat => concat(id, inputs),
        Op::Softmax => softmax_channels(inputs[0]),
    }
}

/// Result of [`run_traced`]: graph outputs plus, optionally, every
/// intermediate activation.
#[derive(Debug)]
pub struct Trace {
    pub outputs: IndexMap<String, Tensor>,
    pub activations: HashMap<String, Tensor>,
    pub counter: OpCounter,
}

/// Executes `graph` and returns the tensors named in `graph.outputs`.
pub fn run(graph: &Graph, weights: &WeightStore, input: &Tensor) -> Result<IndexMap<String, Tensor>, ExecError> {
    Ok(run_traced(graph, weights, input, false)?.outputs)
}

/// Executes `graph` and reports how many multiply-accumulates were issued.
pub fn run_counted(
    graph: &Graph,
    weights: &WeightStore,
    input: &Tensor,
) -> Result<(IndexMap<String, Tensor>, OpCounter), ExecError> {
    let t = run_traced(graph, weights, input, false)?;
    Ok((t.outputs, t.counter))
}

pub fn run_traced(graph: &Graph, weights: &WeightStore, input: &Tensor, keep_all: bool) -> Result<Trace, ExecError> {
    graph.validate().map_err(ExecError::Graph)?;
    if input.dims() != graph.input_shape.dims() {
        return Err(ExecError::InputShape { expected: graph.input_shape, got: input.dims().to_vec() });
    }
    let order = graph.topo_order().map_err(|e| ExecError::Graph(vec![e]))?;

    // Remaining reads per tensor so intermediates can be dropped early.
    let mut pending: HashMap<&str, usize> = HashMap::new();
    for node in &graph.nodes {
        for i in &node.inputs {
            *pending.entry(i.as_str()).or_default() += 1;
        }
    }
    for o in &graph.outputs {
        *pending.entry(o.as_str()).or_default() += 1;
    }

    let mut live: HashMap<String, Tensor> = HashMap::new();
    let mut all = HashMap::new();
    live.insert(INPUT.to_string(), input.clone());
    let mut counter = OpCounter::default();
    for idx in order {
        let node = &graph.nodes[idx];
        let out = {
            let ins: Vec<&Tensor> = node.inputs.iter().map(|i| &live[i]).collect();
            execute_node(node, &ins, weights, &mut counter)?
        };
        if !keep_all {
            for i in &node.inputs {
                let left = pending.get_mut(i.as_str()).expect("counted above");
                *left -= 1;
                if *left == 0 {
                    live.remove(i);
                }
            }
        }
        if keep_all {
            all.insert(node.id.clone(), out.clone());
        }
        live.insert(node.id.clone(), out);
    }
    let outputs = graph.outputs.iter().map(|o| (o.clone(), live[o].clone())).collect();
    if keep_all {
        all.insert(INPUT.to_string(), input.clone());
    }
    Ok(Trace { outputs, activations: all, counter })
}
