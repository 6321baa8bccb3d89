use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::graph::{ConvSpec, Graph, LayerNode, Op, Pair};
use crate::tensor::{Tensor, WeightStore};

use super::{check_valid, weight, TransformError};

/// How many basis filters [`pca_decompose`] keeps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankChoice {
    Rank(usize),
    /// Smallest rank whose squared singular values reach this share of the total.
    EnergyFraction(f64),
}

/// Replaces a convolution by a `rank`-filter basis convolution followed by a
/// 1x1 recombination.
///
/// The filters are flattened into an `out x (in * kh * kw)` matrix `M`
/// and factored without centering as `M = U S V^T`. The basis layer
/// `{layer_id}_basis` holds the rows of `S V^T` and inherits stride, pad and
/// dilation; the 1x1 layer keeps the original id, holds the columns of `U`
/// and the original bias.
pub fn pca_decompose(
    graph: &Graph,
    weights: &WeightStore,
    layer_id: &str,
    choice: RankChoice,
) -> Result<(Graph, WeightStore), TransformError> {
    check_valid(graph)?;
    let node = graph.node(layer_id).ok_or_else(|| TransformError::UnknownLayer(layer_id.to_string()))?;
    let Op::Conv(spec) = &node.op else {
        return Err(TransformError::WrongKind { layer: layer_id.into(), kind: node.op.kind(), expected: "conv" });
    };
    if spec.groups != 1 {
        return Err(TransformError::Unsupported { layer: layer_id.into(), reason: "grouped convolution".into() });
    }
    let basis_id = format!("{layer_id}_basis");
    if graph.node(&basis_id).is_some() {
        return Err(TransformError::Unsupported { layer: layer_id.into(), reason: format!("`{basis_id}` already exists") });
    }
    let w = weight(weights, layer_id, "weight")?;
    let [out_c, in_c, kh, kw] = w.dims()[..] else {
        return Err(TransformError::Unsupported { layer: layer_id.into(), reason: "weight is not rank 4".into() });
    };
    let k = in_c * kh * kw;
    if w.data().iter().all(|&v| v == 0.0) {
        return Err(TransformError::Degenerate(layer_id.to_string()));
    }

    let m = DMatrix::from_row_iterator(out_c, k, w.data().iter().map(|&v| v as f64));
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let sigma: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();

    let max = out_c.min(k);
    let rank = match choice {
        RankChoice::Rank(r) => r,
        RankChoice::EnergyFraction(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(TransformError::Unsupported {
                    layer: layer_id.into(),
                    reason: format!("energy fraction {f} is outside (0, 1]"),
                });
            }
            let total: f64 = sigma.iter().map(|s| s * s).sum();
            let mut acc = 0.0;
            let mut r = max;
            for (i, s) in sigma.iter().enumerate() {
                acc += s * s;
                if acc >= f * total * (1.0 - 1e-12) {
                    r = i + 1;
                    break;
                }
            }
            r
        }
    };
    if rank == 0 || rank > max {
        return Err(TransformError::Rank { layer: layer_id.into(), rank, max });
    }

    let mut basis = Vec::with_capacity(rank * k);
    for &i in &order[..rank] {
        basis.extend((0..k).map(|j| (svd.singular_values[i] * v_t[(i, j)]) as f32));
    }
    let mut mix = Vec::with_capacity(out_c * rank);
    for o in 0..out_c {
        mix.extend(order[..rank].iter().map(|&i| u[(o, i)] as f32));
    }

    let basis_spec = ConvSpec { out_channels: rank, has_bias: false, ..*spec };
    let mix_spec = ConvSpec {
        kernel_h: 1,
        kernel_w: 1,
        stride: Pair::square(1),
        pad: Pair::square(0),
        dilation: Pair::square(1),
        ..*spec
    };
    let mut g = graph.clone();
    let at = g.nodes.iter().position(|n| n.id == layer_id).expect("found above");
    g.nodes[at] = LayerNode { id: layer_id.to_string(), op: Op::Conv(mix_spec), inputs: vec![basis_id.clone()] };
    g.nodes.insert(at, LayerNode { id: basis_id.clone(), op: Op::Conv(basis_spec), inputs: node.inputs.clone() });
    check_valid(&g)?;

    let mut out_w = weights.clone();
    out_w.insert(&basis_id, "weight", Tensor::new(vec![rank, in_c, kh, kw], basis).expect("sized"));
    out_w.insert(layer_id, "weight", Tensor::new(vec![out_c, rank, 1, 1], mix).expect("sized"));
    Ok((g, out_w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{TensorShape, INPUT};

    fn single(out: usize, data: Vec<f32>) -> (Graph, WeightStore) {
        let g = Graph::new(
            TensorShape::new(1, 2, 6, 6),
            vec![LayerNode::new("c", Op::Conv(ConvSpec::new(out, 3).pad(1).stride(2).bias(true)), &[INPUT])],
            vec!["c".into()],
        );
        let mut w = WeightStore::new();
        w.insert("c", "weight", Tensor::new(vec![out, 2, 3, 3], data).unwrap());
        w.insert("c", "bias", Tensor::full(&[out], 0.5));
        (g, w)
    }

    #[test]
    fn structure_of_decomposition() {
        let data = (0..4 * 18).map(|i| ((i * 7 % 11) as f32) - 5.0).collect();
        let (g, w) = single(4, data);
        let (g2, w2) = pca_decompose(&g, &w, "c", RankChoice::Rank(2)).unwrap();
        let basis = g2.node("c_basis").unwrap().op.conv_spec().unwrap();
        assert_eq!((basis.out_channels, basis.stride, basis.has_bias), (2, Pair::square(2), false));
        let mix = g2.node("c").unwrap().op.conv_spec().unwrap();
        assert_eq!((mix.kernel_h, mix.out_channels, mix.has_bias), (1, 4, true));
        assert_eq!(w2.get("c", "weight").unwrap().dims(), &[4, 2, 1, 1]);
        assert_eq!(w2.get("c", "bias"), w.get("c", "bias"));
        assert_eq!(g2.infer_shapes().unwrap()["c"], g.infer_shapes().unwrap()["c"]);
    }

    #[test]
    fn energy_fraction_of_rank_one_layer() {
        let base: Vec<f32> = (0..18).map(|i| i as f32 - 8.0).collect();
        let data = (0..3).flat_map(|s| base.iter().map(move |v| v * (s as f32 + 1.0))).collect();
        let (g, w) = single(3, data);
        let (g2, _) = pca_decompose(&g, &w, "c", RankChoice::EnergyFraction(0.999)).unwrap();
        assert_eq!(g2.node("c_basis").unwrap().op.conv_spec().unwrap().out_channels, 1);
    }

    #[test]
    fn invalid_ranks_and_zero_layers() {
        let (g, w) = single(3, vec![0.0; 54]);
        assert_eq!(pca_decompose(&g, &w, "c", RankChoice::Rank(1)), Err(TransformError::Degenerate("c".into())));
        let (g, w) = single(3, vec![1.0; 54]);
        assert!(matches!(pca_decompose(&g, &w, "c", RankChoice::Rank(0)), Err(TransformError::Rank { .. })));
        assert!(matches!(pca_decompose(&g, &w, "c", RankChoice::Rank(4)), Err(TransformError::Rank { max: 3, .. })));
    }
}
