use crate::graph::{Graph, Op, Pair};
use crate::tensor::{Tensor, WeightStore};

use super::{check_valid, weight, TransformError};

/// Keeps every `factor`-th kernel tap (starting at tap 0) of `layer_id` and
/// raises the dilation of the next spatial layer so that the receptive field
/// of the pair is unchanged.
///
/// With the subsampled layer losing `delta` input pixels of extent per axis
/// and having stride `s`, the follower's dilation grows by
/// `delta / ((k_next - 1) * s)`. That quotient must be a whole number;
/// otherwise no exact compensation exists and nothing is rewritten.
pub fn subsample_kernel(
    graph: &Graph,
    weights: &WeightStore,
    layer_id: &str,
    factor: usize,
) -> Result<(Graph, WeightStore), TransformError> {
    check_valid(graph)?;
    let node = graph.node(layer_id).ok_or_else(|| TransformError::UnknownLayer(layer_id.to_string()))?;
    let Op::Conv(spec) = &node.op else {
        return Err(TransformError::WrongKind { layer: layer_id.into(), kind: node.op.kind(), expected: "conv" });
    };
    if factor == 0 {
        return Err(TransformError::Unsupported { layer: layer_id.into(), reason: "factor must be >= 1".into() });
    }
    if factor == 1 {
        return Ok((graph.clone(), weights.clone()));
    }
    if spec.kernel_h < factor || spec.kernel_w < factor {
        return Err(TransformError::Unsupported {
            layer: layer_id.into(),
            reason: format!("kernel {}x{} is smaller than factor {factor}", spec.kernel_h, spec.kernel_w),
        });
    }

    // Walk through non-spatial single-consumer ops to the next spatial layer.
    let consumers = graph.consumers();
    let mut cur = layer_id.to_string();
    let follower = loop {
        let next = consumers.get(cur.as_str()).cloned().unwrap_or_default();
        let [only] = next[..] else {
            return Err(TransformError::Unsupported {
                layer: layer_id.into(),
                reason: format!("`{cur}` has {} consumers; need exactly one following layer", next.len()),
            });
        };
        let n = graph.node(only).expect("consumer exists");
        if n.op.is_spatial() {
            break n;
        }
        if !matches!(n.op, Op::BatchNorm(_) | Op::Relu) {
            return Err(TransformError::Unsupported {
                layer: layer_id.into(),
                reason: format!("following layer `{only}` is a {}", n.op.kind()),
            });
        }
        cur = only.to_string();
    };
    let Op::Conv(next_spec) = &follower.op else {
        return Err(TransformError::Unsupported {
            layer: layer_id.into(),
            reason: format!("following spatial layer `{}` is a {} and cannot be dilated", follower.id, follower.op.kind()),
        });
    };

    let new_kernel = spec.kernel().map(|k| k.div_ceil(factor));
    let lost = spec.kernel().zip(new_kernel, |k, nk| k - nk).zip(spec.dilation, |d, dil| d * dil);
    let compensate = |lost: usize, k_next: usize, stride: usize| -> Option<usize> {
        if lost == 0 {
            return Some(0);
        }
        let unit = k_next.checked_sub(1)? * stride;
        (unit > 0 && lost.is_multiple_of(unit)).then(|| lost / unit)
    };
    let (Some(extra_h), Some(extra_w)) = (
        compensate(lost.h, next_spec.kernel_h, spec.stride.h),
        compensate(lost.w, next_spec.kernel_w, spec.stride.w),
    ) else {
        return Err(TransformError::Unsupported {
            layer: layer_id.into(),
            reason: format!(
                "no whole dilation on `{}` compensates a {}x{} extent loss",
                follower.id, lost.h, lost.w
            ),
        });
    };
    let extra = Pair::new(extra_h, extra_w);

    let mut g = graph.clone();
    {
        let s = g.node_mut(layer_id).unwrap().op.conv_spec_mut().unwrap();
        s.kernel_h = new_kernel.h;
        s.kernel_w = new_kernel.w;
        s.pad = s.pad.zip(lost, |p, l| p.saturating_sub(l / 2));
    }
    {
        let s = g.node_mut(&follower.id).unwrap().op.conv_spec_mut().unwrap();
        let k = s.kernel();
        s.pad = s.pad.zip(extra.zip(k, |e, k| e * (k - 1) / 2), |p, e| p + e);
        s.dilation = s.dilation.zip(extra, |d, e| d + e);
    }
    check_valid(&g)?;

    let w = weight(weights, layer_id, "weight")?;
    let [o, c, kh, kw] = w.dims()[..] else {
        return Err(TransformError::Unsupported { layer: layer_id.into(), reason: "weight is not rank 4".into() });
    };
    let mut data = Vec::with_capacity(o * c * new_kernel.h * new_kernel.w);
    for oc in 0..o * c {
        for i in (0..kh).step_by(factor) {
            for j in (0..kw).step_by(factor) {
                data.push(w.data()[(oc * kh + i) * kw + j]);
            }
        }
    }
    let mut out_w = weights.clone();
    out_w.insert(layer_id, "weight", Tensor::new(vec![o, c, new_kernel.h, new_kernel.w], data).expect("sized above"));
    Ok((g, out_w))
}
