use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slimdet::cost;
use slimdet::executor::run;
use slimdet::graph::{BatchNormSpec, ConvSpec, Graph, LayerNode, Op, TensorShape, INPUT};
use slimdet::pipeline::random_input;
use slimdet::tensor::{Tensor, WeightStore};
use slimdet::transforms::{
    apply_selection, fold_bn, mask_channels, pca_decompose, prunable_units, rewrite_stride_to_dilation, select_prune,
    PruneSchedule, RankChoice,
};
use slimdet::zoo::{build_resnet10_trunk_graph, build_ssdr, init_weights, InitScheme, SsdrVariant, REDUCTION_LAYER_IDS};
use slimdet_fixtures::{random_selection, random_weights, residual_graph};

fn only_output(g: &Graph, w: &WeightStore, x: &Tensor) -> Tensor {
    run(g, w, x).unwrap().into_values().next().unwrap()
}

fn conv_bn(seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(1..=4);
    let groups = if rng.random_bool(0.3) { c } else { 1 };
    let out = groups * rng.random_range(1..=3);
    let k = [1, 3, 5][rng.random_range(0..3)];
    let d = rng.random_range(1..=2);
    let spec = ConvSpec::new(out, k)
        .stride(rng.random_range(1..=2))
        .dilation(d)
        .pad(d * (k - 1) / 2)
        .groups(groups)
        .bias(rng.random_bool(0.5));
    Graph::new(
        TensorShape::new(rng.random_range(1..=2), c, rng.random_range(6..=12), rng.random_range(6..=12)),
        vec![
            LayerNode::new("conv", Op::Conv(spec), &[INPUT]),
            LayerNode::new("bn", Op::BatchNorm(BatchNormSpec { epsilon: rng.random_range(1e-6..1e-3) }), &["conv"]),
        ],
        vec!["bn".into()],
    )
}

#[test]
fn bn_folding_is_output_preserving() {
    for seed in 0..60 {
        let g = conv_bn(seed);
        let w = random_weights(&g, seed + 1000);
        let x = random_input(&g, seed);
        let folded = fold_bn(&g, &w).unwrap();
        assert_eq!(folded.folded, vec!["bn".to_string()]);
        let diff = only_output(&g, &w, &x).max_abs_diff(&only_output(&folded.graph, &folded.weights, &x)).unwrap();
        assert!(diff < 1e-5, "seed {seed}: {diff}");
    }
}

fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let scale = b.data().iter().fold(0f64, |m, v| m.max((*v as f64).abs())).max(1e-12);
    a.max_abs_diff(b).unwrap() as f64 / scale
}

/// Values of `dense` at every `factor`-th row and column.
fn subsample(dense: &Tensor, factor: usize) -> Tensor {
    let [n, c, h, w] = <[usize; 4]>::try_from(dense.dims()).unwrap();
    let (oh, ow) = (h.div_ceil(factor), w.div_ceil(factor));
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for nc in 0..n * c {
        for y in 0..oh {
            for x in 0..ow {
                out.push(dense.data()[(nc * h + y * factor) * w + x * factor]);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).unwrap()
}

#[test]
fn stride_rewrite_matches_on_the_strided_grid() {
    let base = build_resnet10_trunk_graph();
    let small = Graph { input_shape: TensorShape::new(1, 3, 64, 80), ..base };
    let rewritten = rewrite_stride_to_dilation(&small, &REDUCTION_LAYER_IDS).unwrap();
    for seed in 0..20 {
        let w = init_weights(&small, seed, InitScheme::HeNormalRandomBn);
        let x = random_input(&small, seed);
        let strided = only_output(&small, &w, &x);
        let dense = only_output(&rewritten, &w, &x);
        let sampled = subsample(&dense, 4);
        assert_eq!(sampled.dims(), strided.dims());
        let err = relative_error(&sampled, &strided);
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
        assert_eq!(rewritten.receptive_field("post_relu").unwrap(), base_rf());
    }
}

fn base_rf() -> slimdet::graph::ReceptiveField {
    let g = rewrite_stride_to_dilation(&build_resnet10_trunk_graph(), &REDUCTION_LAYER_IDS).unwrap();
    g.receptive_field("post_relu").unwrap()
}

#[test]
fn pruning_equals_masking_on_random_selections() {
    let mut coupled_cases = 0;
    let mut checked = 0;
    for seed in 0..80u64 {
        let g = residual_graph(seed);
        let w = random_weights(&g, seed);
        let sel = random_selection(&g, seed);
        if sel.is_empty() {
            continue;
        }
        let units = prunable_units(&g).unwrap();
        if units.iter().any(|u| u.members.len() > 1 && sel.iter().any(|s| u.members.contains(&s.layer_id))) {
            coupled_cases += 1;
        }
        let (pg, pw) = apply_selection(&g, &w, &sel).unwrap();
        let mw = mask_channels(&g, &w, &sel).unwrap();
        let x = random_input(&g, seed);
        let diff = only_output(&pg, &pw, &x).max_abs_diff(&only_output(&g, &mw, &x)).unwrap();
        assert!(diff < 1e-5, "seed {seed}: {diff}");
        checked += 1;
    }
    assert!(checked >= 50, "{checked} cases");
    assert!(coupled_cases >= 10, "{coupled_cases} coupled cases");
}

#[test]
fn coupled_members_share_one_mask() {
    let (g, w) = build_ssdr(SsdrVariant::V1_5, 3);
    let sel = select_prune(&g, &w, &PruneSchedule::new(0.05, 0.10)).unwrap();
    let by_layer: BTreeMap<&str, &Vec<usize>> = sel.iter().map(|s| (s.layer_id.as_str(), &s.kept_indices)).collect();
    let mut groups = 0;
    for unit in prunable_units(&g).unwrap().iter().filter(|u| u.members.len() > 1) {
        let masks: Vec<_> = unit.members.iter().map(|m| by_layer[m.as_str()]).collect();
        assert!(masks.windows(2).all(|p| p[0] == p[1]), "{:?}", unit.members);
        groups += 1;
    }
    assert!(groups > 0);

    for seed in 0..20 {
        let g = residual_graph(seed);
        let w = random_weights(&g, seed);
        let sel = select_prune(&g, &w, &PruneSchedule::new(0.3, 0.5)).unwrap();
        let (pg, _) = apply_selection(&g, &w, &sel).unwrap();
        for group in pg.coupled_groups() {
            let outs: Vec<usize> =
                group.member_layer_ids.iter().map(|m| pg.node(m).unwrap().op.conv_spec().unwrap().out_channels).collect();
            assert!(outs.windows(2).all(|p| p[0] == p[1]));
        }
    }
}

fn single_conv(seed: u64) -> (Graph, WeightStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ConvSpec::new(rng.random_range(10..=16), 3)
        .pad(1)
        .stride(rng.random_range(1..=2))
        .bias(rng.random_bool(0.5));
    let g = Graph::new(
        TensorShape::new(1, rng.random_range(2..=4), 9, 11),
        vec![LayerNode::new("conv", Op::Conv(spec), &[INPUT])],
        vec!["conv".into()],
    );
    let w = random_weights(&g, seed);
    (g, w)
}

/// Frobenius distance between the original filters and basis x recombination.
fn reconstruction_error(orig: &WeightStore, dec: &WeightStore) -> f64 {
    let w = orig.get("conv", "weight").unwrap();
    let basis = dec.get("conv_basis", "weight").unwrap();
    let proj = dec.get("conv", "weight").unwrap();
    let (out, k) = (w.dims()[0], w.row_len());
    let r = basis.dims()[0];
    let mut err = 0.0;
    for o in 0..out {
        for j in 0..k {
            let mut v = 0f64;
            for t in 0..r {
                v += proj.data()[o * r + t] as f64 * basis.data()[t * k + j] as f64;
            }
            err += (v - w.data()[o * k + j] as f64).powi(2);
        }
    }
    err.sqrt()
}

#[test]
fn pca_reconstruction_and_cost() {
    for seed in 0..24 {
        let (g, w) = single_conv(seed);
        let spec = *g.node("conv").unwrap().op.conv_spec().unwrap();
        let k = g.input_shape.c * 9;
        let full = spec.out_channels.min(k);

        let (fg, fw) = pca_decompose(&g, &w, "conv", RankChoice::Rank(full)).unwrap();
        let x = random_input(&g, seed);
        assert!(only_output(&g, &w, &x).max_abs_diff(&only_output(&fg, &fw, &x)).unwrap() < 1e-4);

        let mut previous = f64::INFINITY;
        for rank in 1..=10 {
            let (dg, dw) = pca_decompose(&g, &w, "conv", RankChoice::Rank(rank)).unwrap();
            let e = reconstruction_error(&w, &dw);
            assert!(e <= previous + 1e-9, "seed {seed} rank {rank}: {e} > {previous}");
            previous = e;

            let shapes = g.infer_shapes().unwrap();
            let o = shapes["conv"];
            let expected = (rank * o.h * o.w * k + spec.out_channels * o.h * o.w * rank) as u64;
            assert_eq!(cost::report(&dg).unwrap().total_macs, expected);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fold_then_prune_commutes_with_masking(seed in 0u64..10_000) {
        let g = residual_graph(seed);
        let w = random_weights(&g, seed);
        let sel = random_selection(&g, seed ^ 0xabc);
        prop_assume!(!sel.is_empty());
        let folded = fold_bn(&g, &w).unwrap();
        let x = random_input(&g, seed);
        let (pg, pw) = apply_selection(&folded.graph, &folded.weights, &sel).unwrap();
        let mw = mask_channels(&folded.graph, &folded.weights, &sel).unwrap();
        let diff = only_output(&pg, &pw, &x).max_abs_diff(&only_output(&folded.graph, &mw, &x)).unwrap();
        prop_assert!(diff < 1e-4);
    }
}
