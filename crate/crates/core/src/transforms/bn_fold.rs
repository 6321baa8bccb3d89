use crate::graph::{Graph, Op};
use crate::tensor::{Tensor, WeightStore};

use super::{check_valid, weight, TransformError};

/// Result of [`fold_bn`]. `skipped` lists batch-norm layers left in place
/// with the reason they could not be merged.
#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub graph: Graph,
    pub weights: WeightStore,
    pub folded: Vec<String>,
    pub skipped: Vec<(String, String)>,
}

/// Merges every inference-mode batch norm that directly follows a
/// convolution into that convolution's weights and bias.
///
/// Row `o` of the weight is scaled by `gamma[o] / sqrt(var[o] + eps)`; the
/// bias becomes `scale * (bias - mean) + beta`.
pub fn fold_bn(graph: &Graph, weights: &WeightStore) -> Result<FoldOutcome, TransformError> {
    check_valid(graph)?;
    let consumers = graph.consumers();
    let mut g = graph.clone();
    let mut w = weights.clone();
    let mut folded = Vec::new();
    let mut skipped = Vec::new();

    for bn in &graph.nodes {
        let Op::BatchNorm(spec) = &bn.op else { continue };
        let producer_id = &bn.inputs[0];
        let Some(producer) = graph.node(producer_id) else {
            skipped.push((bn.id.clone(), "input is the graph input".to_string()));
            continue;
        };
        let Some(conv) = producer.op.conv_spec() else {
            skipped.push((bn.id.clone(), format!("input `{producer_id}` is a {}", producer.op.kind())));
            continue;
        };
        let users = consumers.get(producer_id.as_str()).map_or(0, Vec::len);
        if users != 1 || graph.outputs.contains(producer_id) {
            skipped.push((bn.id.clone(), format!("conv `{producer_id}` has other consumers")));
            continue;
        }

        let mean = weight(weights, &bn.id, "mean")?.data();
        let var = weight(weights, &bn.id, "variance")?.data();
        let gamma = weight(weights, &bn.id, "gamma")?.data();
        let beta = weight(weights, &bn.id, "beta")?.data();
        let out_c = conv.out_channels;
        if [mean.len(), var.len(), gamma.len(), beta.len()].iter().any(|&l| l != out_c) {
            return Err(TransformError::InvalidSelection {
                layer: bn.id.clone(),
                detail: format!("batch-norm parameters do not have {out_c} entries"),
            });
        }
        let kernel = weight(weights, producer_id, "weight")?;
        let row = kernel.row_len();
        let old_bias = if conv.has_bias { Some(weight(weights, producer_id, "bias")?.data().to_vec()) } else { None };

        let mut new_kernel = kernel.data().to_vec();
        let mut new_bias = vec![0f32; out_c];
        for o in 0..out_c {
            let denom = var[o] as f64 + spec.epsilon;
            if !(denom > 0.0) {
                return Err(TransformError::Unsupported {
                    layer: bn.id.clone(),
                    reason: format!("non-positive variance + epsilon at channel {o}"),
                });
            }
            let scale = gamma[o] as f64 / denom.sqrt();
            for v in &mut new_kernel[o * row..(o + 1) * row] {
                *v = (*v as f64 * scale) as f32;
            }
            let b = old_bias.as_ref().map_or(0.0, |b| b[o] as f64);
            new_bias[o] = (scale * (b - mean[o] as f64) + beta[o] as f64) as f32;
        }
        w.insert(producer_id, "weight", Tensor::new(kernel.dims().to_vec(), new_kernel).expect("same dims"));
        w.insert(producer_id, "bias", Tensor::new(vec![out_c], new_bias).expect("length matches"));
        w.remove_layer(&bn.id);

        let node = g.node_mut(producer_id).expect("producer exists");
        node.op.conv_spec_mut().expect("checked above").has_bias = true;
        g.nodes.retain(|n| n.id != bn.id);
        for n in &mut g.nodes {
            for i in &mut n.inputs {
                if *i == bn.id {
                    *i = producer_id.clone();
                }
            }
        }
        for o in &mut g.outputs {
            if *o == bn.id {
                *o = producer_id.clone();
            }
        }
        folded.push(bn.id.clone());
    }
    check_valid(&g)?;
    Ok(FoldOutcome { graph: g, weights: w, folded, skipped })
}
