use std::collections::HashMap;

use crate::graph::{Graph, Op, Pair, INPUT};

use super::{check_valid, TransformError};

/// Removes the spatial stride of each named layer and dilates everything
/// downstream so the rewritten network computes the original activations on
/// a denser grid.
///
/// Every convolution strictly downstream of a removed reduction has its
/// dilation and padding multiplied by the product of removed strides crossed
/// on the way to it (the dilation of a single-tap axis stays 1). Weights
/// are unchanged. If `O` is an original activation and `R` the rewritten
/// one, `O[n, c, y, x] == R[n, c, y * s, x * s]` where `s` is that product.
pub fn rewrite_stride_to_dilation(graph: &Graph, reduction_layer_ids: &[&str]) -> Result<Graph, TransformError> {
    check_valid(graph)?;
    let mut removed: HashMap<&str, Pair> = HashMap::new();
    for &id in reduction_layer_ids {
        let node = graph.node(id).ok_or_else(|| TransformError::UnknownLayer(id.to_string()))?;
        let stride = match &node.op {
            Op::Conv(s) | Op::DepthwiseConv(s) => s.stride,
            Op::MaxPool(p) | Op::AvgPool(p) => p.stride,
            op => {
                return Err(TransformError::WrongKind {
                    layer: id.to_string(),
                    kind: op.kind(),
                    expected: "convolution or pooling layer",
                })
            }
        };
        if stride.h <= 1 && stride.w <= 1 {
            return Err(TransformError::NotStrided(id.to_string()));
        }
        removed.insert(id, stride);
    }

    let mut factor_out: HashMap<String, Pair> = HashMap::new();
    factor_out.insert(INPUT.to_string(), Pair::square(1));
    let mut g = graph.clone();
    let index = graph.index();
    for node in graph.sorted_nodes()? {
        let factor_in = node
            .inputs
            .iter()
            .map(|i| factor_out[i])
            .fold(Pair::square(1), |a, b| a.zip(b, usize::max));
        let rewritten = &mut g.nodes[index[node.id.as_str()]];
        let dilated = factor_in != Pair::square(1);
        match &mut rewritten.op {
            Op::Conv(s) | Op::DepthwiseConv(s) => {
                if dilated {
                    // A one-tap axis has no spacing to scale.
                    let f = factor_in.zip(s.kernel(), |f, k| if k > 1 { f } else { 1 });
                    s.dilation = s.dilation.zip(f, |d, f| d * f);
                    s.pad = s.pad.zip(factor_in, |p, f| p * f);
                }
                if removed.contains_key(node.id.as_str()) {
                    s.stride = Pair::square(1);
                }
            }
            Op::MaxPool(p) | Op::AvgPool(p) => {
                if dilated && (p.kernel.h > 1 || p.kernel.w > 1) {
                    return Err(TransformError::Unsupported {
                        layer: node.id.clone(),
                        reason: "pooling downstream of a removed stride cannot be dilated".into(),
                    });
                }
                if removed.contains_key(node.id.as_str()) {
                    p.stride = Pair::square(1);
                }
            }
            _ => {}
        }
        let own = removed.get(node.id.as_str()).copied().unwrap_or(Pair::square(1));
        factor_out.insert(node.id.clone(), factor_in.zip(own, |a, b| a * b));
    }
    check_valid(&g)?;
    Ok(g)
}
