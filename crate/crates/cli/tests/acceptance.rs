//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails outside the documented known gaps.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slimdet::cost;
use slimdet::detection::cluster_priors;
use slimdet::detection::nms;
use slimdet::executor::{conv2d, run};
use slimdet::evaluation::{average_precision, ImageEval, Interpolation};
use slimdet::graph::{BatchNormSpec, ConvSpec, Graph, LayerNode, Op, Pair, TensorShape, INPUT};
use slimdet::pipeline::random_input;
use slimdet::tensor::{Tensor, WeightStore};
use slimdet::transforms::{
    apply_selection, fold_bn, iterative_prune, mask_channels, pca_decompose, prunable_units, prune_count,
    rewrite_stride_to_dilation, select_prune, PruneSchedule, RankChoice, StopReason,
};
use slimdet::zoo::{
    build_resnet10_ssd_graph, build_resnet10_trunk_graph, build_ssdr, build_ssdr_graph, init_weights, InitScheme,
    SsdrVariant, REDUCTION_LAYER_IDS, SSDR_ROW_IDS,
};
use slimdet_fixtures::{
    oracle_ap, oracle_conv, oracle_nms, planted_clusters, random_eval_instance, random_selection, random_weights,
    residual_graph, EvalInstance,
};

enum Outcome {
    Pass(String),
    Fail(String),
    /// Fails for a reason recorded as out of reach at desk scale.
    KnownGap(String),
}

type Check = Result<String, String>;

type Criterion = (&'static str, Box<dyn Fn() -> Outcome>);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn only_output(g: &Graph, w: &WeightStore, x: &Tensor) -> Tensor {
    run(g, w, x).unwrap().into_values().next().unwrap()
}

fn within(got: f64, want: f64, band: f64) -> bool {
    (got / want - 1.0).abs() <= band
}

fn cost_reproduction() -> Outcome {
    let start = Instant::now();
    let mut hard = Vec::new();
    let mut detail = Vec::new();
    for (variant, macs, params) in [(SsdrVariant::V1_5, 1.5e9, 1.1e6), (SsdrVariant::V0_75, 0.75e9, 0.47e6), (SsdrVariant::V0_47, 0.47e9, 0.24e6)] {
        let r = cost::report(&build_ssdr_graph(variant)).unwrap();
        detail.push(format!("{} {:.3}G/{:.3}M", variant.name(), r.gmacs(), r.mparams()));
        if !within(r.total_macs as f64, macs, 0.10) || !within(r.total_params as f64, params, 0.10) {
            hard.push(variant.name().to_string());
        }
    }
    let r = cost::report(&build_resnet10_ssd_graph()).unwrap();
    let resnet_macs_ok = within(r.total_macs as f64, 1.8e9, 0.15);
    let resnet_params_ok = within(r.total_params as f64, 4.0e6, 0.15);
    detail.push(format!("resnet10_ssd {:.3}G/{:.3}M", r.gmacs(), r.mparams()));
    let elapsed = start.elapsed();
    detail.push(format!("{:.0} ms", elapsed.as_secs_f64() * 1e3));
    let detail = detail.join(", ");
    if !hard.is_empty() || !resnet_params_ok || elapsed >= Duration::from_secs(1) {
        Outcome::Fail(format!("{detail}; out of band: {hard:?} params_ok={resnet_params_ok}"))
    } else if !resnet_macs_ok {
        Outcome::KnownGap(format!("{detail}; resnet10_ssd MACs outside 1.8e9 +-15% (documented gap)"))
    } else {
        Outcome::Pass(detail)
    }
}

fn shape_reproduction() -> Check {
    let rows = [(128, 160), (64, 80), (64, 80), (32, 40), (32, 40), (32, 40), (16, 20), (8, 10)];
    for variant in SsdrVariant::ALL {
        let shapes = build_ssdr_graph(variant).infer_shapes().map_err(|e| e.to_string())?;
        for (id, (h, w)) in SSDR_ROW_IDS.iter().zip(rows) {
            let s = shapes[*id];
            ensure((s.h, s.w) == (h, w), || format!("{} {id}: {}x{} want {h}x{w}", variant.name(), s.h, s.w))?;
        }
    }
    Ok("8 rows x 3 variants".into())
}

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

fn atrous_equivalence() -> Check {
    let start = Instant::now();
    let base = build_resnet10_trunk_graph();
    let small = Graph { input_shape: TensorShape::new(1, 3, 64, 80), ..base.clone() };
    let rewritten = rewrite_stride_to_dilation(&small, &REDUCTION_LAYER_IDS).map_err(|e| e.to_string())?;
    let full = rewrite_stride_to_dilation(&base, &REDUCTION_LAYER_IDS).map_err(|e| e.to_string())?;
    let ssdr_trunk = slimdet::zoo::build_ssdr_trunk_graph(SsdrVariant::V1_5);
    for id in ["post_relu", "res4_add", "res3_add"] {
        let got = full.receptive_field(id).map_err(|e| e.to_string())?;
        let want = ssdr_trunk.receptive_field(id).map_err(|e| e.to_string())?;
        ensure(got == want, || format!("{id}: rf {got:?} vs {want:?}"))?;
    }
    let mut worst = 0f64;
    for seed in 0..20 {
        let w = init_weights(&small, seed, InitScheme::HeNormalRandomBn);
        let x = random_input(&small, seed);
        let strided = only_output(&small, &w, &x);
        let sampled = subsample(&only_output(&rewritten, &w, &x), 4);
        ensure(sampled.dims() == strided.dims(), || format!("seed {seed}: shape mismatch"))?;
        let scale = strided.data().iter().fold(0f64, |m, v| m.max((*v as f64).abs())).max(1e-12);
        let err = sampled.max_abs_diff(&strided).unwrap() as f64 / scale;
        ensure(err < 1e-4, || format!("seed {seed}: relative error {err:e}"))?;
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!("20 trunks at 64x80, max rel err {worst:.2e}, rf exact, {:.1} s", elapsed.as_secs_f64()))
}

fn bn_folding() -> Check {
    let mut worst = 0f32;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.random_range(1..=4);
        let groups = if rng.random_bool(0.3) { c } else { 1 };
        let k = [1, 3, 5][rng.random_range(0..3)];
        let spec = ConvSpec::new(groups * rng.random_range(1..=3), k)
            .stride(rng.random_range(1..=2))
            .pad(k / 2)
            .groups(groups)
            .bias(rng.random_bool(0.5));
        let g = Graph::new(
            TensorShape::new(1, c, rng.random_range(6..=12), rng.random_range(6..=12)),
            vec![
                LayerNode::new("conv", Op::Conv(spec), &[INPUT]),
                LayerNode::new("bn", Op::BatchNorm(BatchNormSpec { epsilon: 1e-5 }), &["conv"]),
            ],
            vec!["bn".into()],
        );
        let w = random_weights(&g, seed + 500);
        let x = random_input(&g, seed);
        let f = fold_bn(&g, &w).map_err(|e| e.to_string())?;
        let d = only_output(&g, &w, &x).max_abs_diff(&only_output(&f.graph, &f.weights, &x)).unwrap();
        ensure(d < 1e-5, || format!("seed {seed}: {d:e}"))?;
        worst = worst.max(d);
    }
    Ok(format!("50 layers, max abs diff {worst:.2e}"))
}

fn pruning_equivalence() -> Check {
    let (mut checked, mut coupled, mut worst) = (0, 0, 0f32);
    for seed in 0..80u64 {
        let g = residual_graph(seed);
        let w = random_weights(&g, seed);
        let sel = random_selection(&g, seed);
        if sel.is_empty() {
            continue;
        }
        let units = prunable_units(&g).map_err(|e| e.to_string())?;
        if units.iter().any(|u| u.members.len() > 1 && sel.iter().any(|s| u.members.contains(&s.layer_id))) {
            coupled += 1;
        }
        let (pg, pw) = apply_selection(&g, &w, &sel).map_err(|e| e.to_string())?;
        let mw = mask_channels(&g, &w, &sel).map_err(|e| e.to_string())?;
        let x = random_input(&g, seed);
        let d = only_output(&pg, &pw, &x).max_abs_diff(&only_output(&g, &mw, &x)).unwrap();
        ensure(d < 1e-5, || format!("seed {seed}: {d:e}"))?;
        worst = worst.max(d);
        checked += 1;
    }
    ensure(checked >= 50 && coupled >= 10, || format!("{checked} cases, {coupled} coupled"))?;

    let (g, w) = build_ssdr(SsdrVariant::V1_5, 3);
    let sel = select_prune(&g, &w, &PruneSchedule::new(0.05, 0.10)).map_err(|e| e.to_string())?;
    let masks: BTreeMap<&str, &Vec<usize>> = sel.iter().map(|s| (s.layer_id.as_str(), &s.kept_indices)).collect();
    let mut groups = 0;
    for unit in prunable_units(&g).unwrap().iter().filter(|u| u.members.len() > 1) {
        let first = masks.get(unit.members[0].as_str());
        ensure(unit.members.iter().all(|m| masks.get(m.as_str()) == first), || format!("{:?} masks differ", unit.members))?;
        groups += 1;
    }
    Ok(format!("{checked} selections ({coupled} coupled), max diff {worst:.2e}, {groups} SSDR groups share masks"))
}

fn prune_schedule_arithmetic() -> Check {
    ensure(prune_count(0.05, 64) == 3, || format!("64 @ 5% -> {}", prune_count(0.05, 64)))?;
    ensure(prune_count(0.10, 128) == 12, || format!("128 @ 10% -> {}", prune_count(0.10, 128)))?;
    let (g, w) = build_ssdr(SsdrVariant::V1_5, 0);
    let sel = select_prune(&g, &w, &PruneSchedule::new(0.05, 0.10)).map_err(|e| e.to_string())?;
    let kept: BTreeMap<&str, usize> = sel.iter().map(|s| (s.layer_id.as_str(), s.kept_indices.len())).collect();
    let units = prunable_units(&g).unwrap();
    let mut seen = (false, false);
    for u in &units {
        let k = kept.get(u.members[0].as_str()).copied().unwrap_or(u.out_channels);
        match (u.first_half, u.out_channels) {
            (true, 64) => {
                ensure(k == 61, || format!("{:?}: kept {k} of 64", u.members))?;
                seen.0 = true;
            }
            (false, 128) => {
                ensure(k == 116, || format!("{:?}: kept {k} of 128", u.members))?;
                seen.1 = true;
            }
            _ => {}
        }
    }
    ensure(seen == (true, true), || "SSDR_1.5 lacks a 64-channel first-half or 128-channel second-half unit".into())?;
    Ok("64 -> 61 (first half), 128 -> 116 (second half)".into())
}

fn iterative_budget() -> Check {
    let (g, w) = build_ssdr(SsdrVariant::V1_5, 0);
    let start = cost::report(&g).unwrap().total_macs;
    let schedule = PruneSchedule { iterations: 0, target_flops: Some(470_000_000), ..PruneSchedule::new(0.05, 0.10) };
    let out = iterative_prune(&g, &w, &schedule).map_err(|e| e.to_string())?;
    let mut hist = vec![start];
    hist.extend(out.history.iter().map(|r| r.macs));
    let last = *hist.last().unwrap();
    ensure(out.stop == StopReason::TargetReached, || format!("stopped with {:?}", out.stop))?;
    ensure(last <= 494_000_000, || format!("final {last}"))?;
    ensure(hist.windows(2).all(|p| p[1] < p[0]), || format!("history not strictly decreasing: {hist:?}"))?;
    Ok(format!("{} rounds, {:.4e} -> {:.4e} MACs", out.history.len(), start as f64, last as f64))
}

fn pca_decomposition() -> Check {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ConvSpec::new(rng.random_range(10..=16), 3).pad(1).stride(rng.random_range(1..=2));
        let g = Graph::new(
            TensorShape::new(1, rng.random_range(2..=4), 9, 11),
            vec![LayerNode::new("conv", Op::Conv(spec), &[INPUT])],
            vec!["conv".into()],
        );
        let w = random_weights(&g, seed);
        let k = g.input_shape.c * 9;
        let x = random_input(&g, seed);
        let (fg, fw) = pca_decompose(&g, &w, "conv", RankChoice::Rank(spec.out_channels.min(k))).map_err(|e| e.to_string())?;
        let d = only_output(&g, &w, &x).max_abs_diff(&only_output(&fg, &fw, &x)).unwrap();
        ensure(d < 1e-4, || format!("seed {seed}: full rank diff {d:e}"))?;
        let orig = w.get("conv", "weight").unwrap();
        let o = g.infer_shapes().unwrap()["conv"];
        let mut previous = f64::INFINITY;
        for rank in 1..=10 {
            let (dg, dw) = pca_decompose(&g, &w, "conv", RankChoice::Rank(rank)).map_err(|e| e.to_string())?;
            let basis = dw.get("conv_basis", "weight").unwrap();
            let proj = dw.get("conv", "weight").unwrap();
            let r = basis.dims()[0];
            let mut err = 0f64;
            for oc in 0..spec.out_channels {
                for j in 0..k {
                    let v: f64 = (0..r).map(|t| proj.data()[oc * r + t] as f64 * basis.data()[t * k + j] as f64).sum();
                    err += (v - orig.data()[oc * k + j] as f64).powi(2);
                }
            }
            ensure(err.sqrt() <= previous + 1e-9, || format!("seed {seed} rank {rank}: error rose"))?;
            previous = err.sqrt();
            let want = (rank * o.h * o.w * k + spec.out_channels * o.h * o.w * rank) as u64;
            let got = cost::report(&dg).unwrap().total_macs;
            ensure(got == want, || format!("seed {seed} rank {rank}: {got} MACs, formula {want}"))?;
        }
    }
    Ok("20 layers, ranks 1..10".into())
}

fn executor_fidelity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let tensor = |rng: &mut ChaCha8Rng, dims: &[usize]| {
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    };
    let mut worst = 0f32;
    let mut combos = std::collections::BTreeSet::new();
    for i in 0..200 {
        let stride = [1, 2][i % 2];
        let dilation = [1, 2, 4, 6][(i / 2) % 4];
        let grouped = (i / 8) % 2 == 1;
        let c = rng.random_range(1..=4);
        let groups = if grouped { c } else { 1 };
        let (kh, kw) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let spec = ConvSpec {
            out_channels: groups * rng.random_range(1..=3),
            kernel_h: kh,
            kernel_w: kw,
            stride: Pair::square(stride),
            pad: Pair::new(rng.random_range(0..=3), rng.random_range(0..=3)),
            dilation: Pair::square(dilation),
            groups,
            has_bias: rng.random_bool(0.5),
        };
        let ext = spec.effective_kernel();
        let h = ext.h + rng.random_range(0..=5);
        let w = ext.w + rng.random_range(0..=5);
        let n = rng.random_range(1..=2);
        let x = tensor(&mut rng, &[n, c, h, w]);
        let wt = tensor(&mut rng, &[spec.out_channels, c / groups, kh, kw]);
        let b = spec.has_bias.then(|| tensor(&mut rng, &[spec.out_channels]));
        let got = conv2d(&x, &spec, &wt, b.as_ref()).map_err(|e| e.to_string())?;
        let want = oracle_conv(&x, &spec, &wt, b.as_ref());
        ensure(got.dims() == want.dims(), || format!("case {i}: shape"))?;
        let d = got.max_abs_diff(&want).unwrap();
        ensure(d < 1e-5, || format!("case {i}: {d:e}"))?;
        worst = worst.max(d);
        combos.insert((stride, dilation, grouped));
    }
    ensure(combos.len() == 16, || format!("{} combos covered", combos.len()))?;
    Ok(format!("200 configurations, 16 stride/dilation/group combos, max diff {worst:.2e}"))
}

fn to_images(inst: &EvalInstance) -> Vec<ImageEval> {
    inst.images.iter().map(|(d, g)| ImageEval { detections: d.clone(), gt: g.clone() }).collect()
}

fn detection_metrics() -> Check {
    let maps: [fn(f64) -> f64; 3] = [|s| s * s * s + 0.1, f64::ln, |s| 1.0 / (1.0 + (-10.0 * (s - 0.5)).exp())];
    let mut worst = 0f64;
    for seed in 0..100 {
        let inst = random_eval_instance(seed);
        let dets: Vec<_> = inst.images.iter().flat_map(|(d, _)| d.iter().copied()).collect();
        for thr in [0.3, 0.45, 0.7] {
            let want: Vec<_> = oracle_nms(&dets, thr).into_iter().map(|i| dets[i]).collect();
            ensure(nms(&dets, thr, usize::MAX) == want, || format!("seed {seed}: nms keep-set differs at {thr}"))?;
        }
        let base = average_precision(&to_images(&inst), 0.5, Interpolation::AllPoint).ap;
        for thr in [0.5, 0.7] {
            let got = average_precision(&to_images(&inst), thr, Interpolation::AllPoint).ap;
            let d = (got - oracle_ap(&inst.images, thr)).abs();
            ensure(d < 1e-9, || format!("seed {seed}: |dAP| {d:e}"))?;
            worst = worst.max(d);
        }
        for f in maps {
            let mut mapped = inst.clone();
            mapped.images.iter_mut().flat_map(|(d, _)| d.iter_mut()).for_each(|d| d.score = f(d.score));
            let ap = average_precision(&to_images(&mapped), 0.5, Interpolation::AllPoint).ap;
            ensure(ap == base, || format!("seed {seed}: AP moved under a monotone map"))?;
        }
    }
    Ok(format!("100 instances, exact keep-sets, max |dAP| {worst:.1e}, monotone invariance holds"))
}

fn clustered_priors() -> Check {
    let planted = planted_clusters(11, 40);
    let priors = cluster_priors(&planted.boxes, 3, 4, 7).map_err(|e| e.to_string())?;
    let sizes = priors.sizes();
    ensure(sizes.len() == 12, || format!("{} priors", sizes.len()))?;
    let mut worst = 0f64;
    for (got, want) in sizes.iter().zip(&planted.centers) {
        let e = (got.w / want.w - 1.0).abs().max((got.h / want.h - 1.0).abs());
        ensure(e < 0.01, || format!("{got:?} vs {want:?}"))?;
        worst = worst.max(e);
    }
    Ok(format!("12 priors, worst relative deviation {:.3}%", worst * 100.0))
}

fn slimdet(dir: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_slimdet")).current_dir(dir).args(args).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))?;
    Ok(out.stdout)
}

/// Emit, transform, infer and evaluate in a fresh directory; returns every
/// produced file by name.
fn end_to_end_run() -> Result<BTreeMap<String, Vec<u8>>, String> {
    let tmp = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let write = |name: &str, bytes: &[u8]| fs::write(dir.join(name), bytes).map_err(|e| e.to_string());
    slimdet(dir, &["--seed", "21", "zoo", "emit", "--model", "ssdr_0.47", "--init", "he-normal-random-bn", "--out-graph", "m.json", "--out-weights", "m.bin"])?;
    write(
        "pipe.json",
        br#"[{"pass":"fold_bn"},{"pass":"one_shot_prune","params":{"first_half_fraction":0.05,"second_half_fraction":0.1}}]"#,
    )?;
    slimdet(dir, &["--json", "transform", "--model", "m.json", "--weights", "m.bin", "--pipeline", "pipe.json", "--out-graph", "t.json", "--out-weights", "t.bin", "--report", "report.json"])?;
    let g = Graph::from_json(&fs::read_to_string(dir.join("m.json")).unwrap()).map_err(|e| e.to_string())?;
    write("frame.tnsr", &random_input(&g, 8).to_bytes())?;
    slimdet(dir, &["infer", "--model", "t.json", "--weights", "t.bin", "--input", "frame.tnsr", "--score-threshold", "0.05", "--out", "det.jsonl"])?;
    let gt = r#"{"image_id":"frame","boxes":[{"x":40,"y":30,"w":60,"h":40,"class":1},{"x":200,"y":120,"w":50,"h":50,"class":1}]}"#;
    write("gt.jsonl", format!("{gt}\n").as_bytes())?;
    let eval = slimdet(dir, &["--json", "eval", "--gt", "gt.jsonl", "--det", "det.jsonl", "--iou", "0.5"])?;
    write("eval.json", &eval)?;
    let mut files = BTreeMap::new();
    for name in ["t.json", "t.bin", "report.json", "det.jsonl", "eval.json"] {
        files.insert(name.to_string(), fs::read(dir.join(name)).map_err(|e| e.to_string())?);
    }
    ensure(!files["det.jsonl"].is_empty(), || "no detections".into())?;
    Ok(files)
}

fn end_to_end_determinism() -> Check {
    let a = end_to_end_run()?;
    let b = end_to_end_run()?;
    for (name, bytes) in &a {
        ensure(b[name] == *bytes, || format!("{name} differs between runs"))?;
    }
    let dets = a["det.jsonl"].iter().filter(|&&c| c == b'\n').count();
    Ok(format!("{} files identical across two runs ({dets} detections)", a.len()))
}

fn main() -> ExitCode {
    let checks: Vec<Criterion> = vec![
        ("cost reproduction", Box::new(cost_reproduction)),
        ("shape reproduction", Box::new(|| shape_reproduction().into())),
        ("a trous equivalence", Box::new(|| atrous_equivalence().into())),
        ("bn folding equivalence", Box::new(|| bn_folding().into())),
        ("pruning equivalence", Box::new(|| pruning_equivalence().into())),
        ("prune schedule arithmetic", Box::new(|| prune_schedule_arithmetic().into())),
        ("iterative budget", Box::new(|| iterative_budget().into())),
        ("pca decomposition", Box::new(|| pca_decomposition().into())),
        ("executor fidelity", Box::new(|| executor_fidelity().into())),
        ("detection metrics", Box::new(|| detection_metrics().into())),
        ("clustered priors", Box::new(|| clustered_priors().into())),
        ("end-to-end determinism", Box::new(|| end_to_end_determinism().into())),
    ];
    let mut hard_failures = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let line = match check() {
            Outcome::Pass(d) => format!("PASS {:>2} {name}: {d}", i + 1),
            Outcome::Fail(d) => {
                hard_failures += 1;
                format!("FAIL {:>2} {name}: {d}", i + 1)
            }
            Outcome::KnownGap(d) => format!("FAIL {:>2} {name}: {d}", i + 1),
        };
        println!("{line}");
    }
    if hard_failures > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

impl From<Check> for Outcome {
    fn from(c: Check) -> Self {
        match c {
            Ok(d) => Outcome::Pass(d),
            Err(d) => Outcome::Fail(d),
        }
    }
}
