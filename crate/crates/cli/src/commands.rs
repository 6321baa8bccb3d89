//! Command bodies. Each returns `Ok(())` or a [`Failure`] carrying the exit
//! code.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use slimdet::cost::{self, CostUnits};
use slimdet::detection::{cluster_priors, decode_heads, generate_priors, DecodeParams, PriorConfig};
use slimdet::evaluation::{evaluate_dataset, parse_ground_truth, DetLine, EvalConfig, Interpolation};
use slimdet::executor::{self, ExecError};
use slimdet::pipeline::{run_pipeline, Pipeline, PipelineError};
use slimdet::tensor::Tensor;
use slimdet::zoo::{self, InitScheme, MODEL_NAMES};

use crate::failure::{Classify, CmdResult, Failure, INPUT, INTERNAL};
use crate::report::{
    sha256_hex, ClusterPriorsReport, EvalReport, InferSummary, InspectReport, LayerInfo, SsdPriorsReport, Tool,
    TransformReport, ZooEmitReport,
};
use crate::source::{self, Model};

/// Global flags.
#[derive(Clone, Copy, Debug)]
pub struct Context {
    pub json: bool,
    pub seed: u64,
    pub units: CostUnits,
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("reports serialize") + "\n"
}

fn read_text(path: &Path, what: &str) -> CmdResult<String> {
    fs::read_to_string(path).input_err(format!("reading {what} {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> CmdResult {
    match out {
        Some(p) => source::write(p, text.as_bytes()),
        None => std::io::stdout().write_all(text.as_bytes()).internal_err("writing stdout"),
    }
}

pub fn inspect(ctx: &Context, model: &str) -> CmdResult {
    let Model { graph, .. } = source::load(model, None, ctx.seed, false)?;
    let shapes = graph.infer_shapes().input_err(format!("model {model}"))?;
    let rfs = graph.receptive_fields().input_err(format!("model {model}"))?;
    let costs = cost::report(&graph).input_err(format!("model {model}"))?;
    let by_id: HashMap<&str, _> = costs.per_layer.iter().map(|e| (e.layer_id.as_str(), e)).collect();
    let order = graph.sorted_nodes().input_err(format!("model {model}"))?;
    let layers: Vec<LayerInfo> = order
        .iter()
        .map(|n| LayerInfo {
            id: n.id.clone(),
            kind: n.op.kind().to_string(),
            output_shape: shapes[&n.id],
            receptive_field: rfs[&n.id],
            macs: by_id.get(n.id.as_str()).map_or(0, |e| e.macs),
            params: by_id.get(n.id.as_str()).map_or(0, |e| e.params),
        })
        .collect();
    let report = InspectReport {
        tool: Tool::current(),
        seed: ctx.seed,
        model: model.to_string(),
        units: ctx.units,
        input_shape: graph.input_shape,
        layers,
        total_macs: costs.total_macs,
        total_params: costs.total_params,
        total_ops: ctx.units.scale(costs.total_macs),
    };
    if ctx.json {
        return emit(None, &to_json(&report));
    }
    let width = report.layers.iter().map(|l| l.id.len()).max().unwrap_or(5).max(5);
    let mut s = format!("model {}  input {}\n", report.model, report.input_shape);
    let _ = writeln!(s, "{:<width$}  {:<14}  {:<18}  {:>9}  {:>14}  {:>10}", "layer", "kind", "shape", "rf", "ops", "params");
    for l in &report.layers {
        let rf = format!("{}x{}", l.receptive_field.size_h, l.receptive_field.size_w);
        let _ = writeln!(
            s,
            "{:<width$}  {:<14}  {:<18}  {:>9}  {:>14}  {:>10}",
            l.id,
            l.kind,
            l.output_shape.to_string(),
            rf,
            ctx.units.scale(l.macs),
            l.params
        );
    }
    let _ = writeln!(
        s,
        "total {:.4} {}  {:.4} MParams",
        report.total_ops as f64 / 1e9,
        ctx.units.label(),
        report.total_params as f64 / 1e6
    );
    emit(None, &s)
}

pub struct TransformArgs {
    pub model: String,
    pub weights: Option<PathBuf>,
    pub pipeline: PathBuf,
    pub out_graph: PathBuf,
    pub out_weights: PathBuf,
    pub report: Option<PathBuf>,
}

pub fn transform(ctx: &Context, args: TransformArgs) -> CmdResult {
    let text = read_text(&args.pipeline, "pipeline")?;
    let pipeline = Pipeline::parse(&text).input_err(format!("pipeline {}", args.pipeline.display()))?;
    let model = source::load(&args.model, args.weights.as_deref(), ctx.seed, true)?;
    let weights = model.weights.expect("requested weights");
    let initial_cost = cost::report(&model.graph).input_err(format!("model {}", args.model))?;
    let mut report = TransformReport {
        tool: Tool::current(),
        seed: ctx.seed,
        model: args.model.clone(),
        pipeline_hash: sha256_hex(pipeline.canonical_json().as_bytes()),
        pipeline: pipeline.descriptors.clone(),
        units: ctx.units,
        initial_cost,
        passes: Vec::new(),
        error: None,
    };
    let outcome = run_pipeline(&model.graph, &weights, &pipeline, ctx.seed);
    let result = match outcome {
        Ok(done) => {
            report.passes = done.reports;
            let (graph_bytes, weight_bytes) = match (&model.raw, pipeline.passes.is_empty()) {
                (Some(raw), true) => raw.clone(),
                _ => (done.graph.to_json().into_bytes(), done.weights.to_bytes()),
            };
            source::write(&args.out_graph, &graph_bytes)?;
            source::write(&args.out_weights, &weight_bytes)?;
            Ok(())
        }
        Err(failure) => {
            report.passes = failure.reports;
            report.error = Some(failure.error.to_string());
            let code = match failure.error {
                PipelineError::Exec { .. } | PipelineError::Cost { .. } => INTERNAL,
                _ => INPUT,
            };
            Err(Failure { code, error: anyhow::anyhow!("{}", failure.error) })
        }
    };
    let json = to_json(&report);
    if let Some(p) = &args.report {
        source::write(p, json.as_bytes())?;
    }
    if ctx.json {
        emit(None, &json)?;
    } else {
        let mut s = format!("pipeline {}  seed {}\n", report.pipeline_hash, report.seed);
        let _ = writeln!(s, "{:<4} {:<28} {:>14} {:>10}", "#", "pass", "ops", "params");
        let _ = writeln!(
            s,
            "{:<4} {:<28} {:>14} {:>10}",
            "-",
            "input",
            ctx.units.scale(report.initial_cost.total_macs),
            report.initial_cost.total_params
        );
        for p in &report.passes {
            let _ = write!(s, "{:<4} {:<28} {:>14} {:>10}", p.index, p.pass, ctx.units.scale(p.cost.total_macs), p.cost.total_params);
            if let Some(eq) = &p.equivalence {
                let _ = write!(s, "  max|diff| {:.3e}", eq.max_abs_diff);
            }
            for n in &p.notes {
                let _ = write!(s, "  {n}");
            }
            s.push('\n');
        }
        emit(None, &s)?;
    }
    result
}

pub struct InferArgs {
    pub model: String,
    pub weights: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub priors: Option<PathBuf>,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_keep: usize,
    pub out: Option<PathBuf>,
}

fn load_prior_config(path: Option<&Path>) -> CmdResult<PriorConfig> {
    let config = match path {
        Some(p) => serde_json::from_str(&read_text(p, "prior config")?).input_err(format!("prior config {}", p.display()))?,
        None => PriorConfig::three_level_default(),
    };
    config.validate().input_err("prior config")?;
    Ok(config)
}

pub fn infer(ctx: &Context, args: InferArgs) -> CmdResult {
    let model = source::load(&args.model, args.weights.as_deref(), ctx.seed, true)?;
    let weights = model.weights.expect("requested weights");
    let config = load_prior_config(args.priors.as_deref())?;
    if model.graph.outputs.len() != 2 * config.levels.len() {
        return Err(Failure::input(format!(
            "model has {} outputs; {} prior levels need {} (score, offset) outputs",
            model.graph.outputs.len(),
            config.levels.len(),
            2 * config.levels.len()
        )));
    }
    let params = DecodeParams { score_threshold: args.score_threshold, nms_iou: args.nms_iou, max_keep: args.max_keep };
    let mut lines = String::new();
    let (mut images, mut detections) = (0, 0);
    for path in &args.inputs {
        let bytes = fs::read(path).input_err(format!("reading input {}", path.display()))?;
        let tensor = Tensor::read_from(&mut bytes.as_slice()).input_err(format!("input {}", path.display()))?;
        let expected = model.graph.input_shape;
        let ok = tensor.dims().len() == 4 && tensor.dims()[1..] == expected.dims()[1..];
        if !ok {
            return Err(Failure::input(format!(
                "input {}: shape {:?} does not match model input (N,{},{},{})",
                path.display(),
                tensor.dims(),
                expected.c,
                expected.h,
                expected.w
            )));
        }
        let mut graph = model.graph.clone();
        graph.input_shape.n = tensor.dims()[0];
        let outputs = executor::run(&graph, &weights, &tensor).map_err(|e| {
            let code = if matches!(e, ExecError::MissingWeight { .. } | ExecError::WeightShape { .. }) { INPUT } else { INTERNAL };
            Failure { code, error: anyhow::anyhow!("running {}: {e}", path.display()) }
        })?;
        let tensors: Vec<&Tensor> = graph.outputs.iter().map(|o| &outputs[o]).collect();
        let pairs: Vec<(&Tensor, &Tensor)> = tensors.chunks(2).map(|c| (c[0], c[1])).collect();
        let per_item = decode_heads(&pairs, &config, &params).input_err(format!("decoding {}", path.display()))?;
        let stem = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        for (i, dets) in per_item.iter().enumerate() {
            let image_id = if per_item.len() == 1 { stem.clone() } else { format!("{stem}:{i}") };
            for d in dets {
                lines.push_str(&serde_json::to_string(&DetLine::from_detection(&image_id, d)).expect("serializes"));
                lines.push('\n');
            }
            detections += dets.len();
            images += 1;
        }
    }
    match &args.out {
        Some(p) => {
            source::write(p, lines.as_bytes())?;
            let summary = InferSummary { tool: Tool::current(), seed: ctx.seed, model: args.model, images, detections };
            if ctx.json {
                emit(None, &to_json(&summary))
            } else {
                emit(None, &format!("{detections} detections for {images} images -> {}\n", p.display()))
            }
        }
        None => emit(None, &lines),
    }
}

pub struct EvalArgs {
    pub gt: PathBuf,
    pub det: PathBuf,
    pub iou: f64,
    pub ioa: f64,
    pub class: Option<usize>,
    pub eleven_point: bool,
}

pub fn eval(ctx: &Context, args: EvalArgs) -> CmdResult {
    let gt = read_text(&args.gt, "ground truth")?;
    let det = read_text(&args.det, "detections")?;
    let config = EvalConfig {
        iou_threshold: args.iou,
        ioa_threshold: args.ioa,
        class_id: args.class,
        interpolation: if args.eleven_point { Interpolation::ElevenPoint } else { Interpolation::AllPoint },
    };
    let result = evaluate_dataset(&gt, &det, &config).input_err("evaluation")?;
    if ctx.json {
        return emit(None, &to_json(&EvalReport { tool: Tool::current(), config, result }));
    }
    let r = &result.result;
    let mut s = format!("AP {:.4}\n", r.ap);
    let _ = writeln!(s, "tp {}  fp {}  gt {}", r.counts.tp, r.counts.fp, r.counts.n_gt);
    for f in &r.flags {
        let _ = writeln!(s, "note: {f}");
    }
    for (p, rc) in r.precision.iter().zip(&r.recall) {
        let _ = writeln!(s, "  precision {p:.4}  recall {rc:.4}");
    }
    emit(None, &s)
}

pub struct PriorsArgs {
    pub cluster: bool,
    pub config: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub scales: usize,
    pub per_scale: usize,
    pub out: Option<PathBuf>,
}

pub fn priors(ctx: &Context, args: PriorsArgs) -> CmdResult {
    let config = load_prior_config(args.config.as_deref())?;
    let text = if args.cluster {
        let gt_path = args.gt.as_deref().ok_or_else(|| Failure::input("cluster mode needs --gt"))?;
        let gts = parse_ground_truth(&read_text(gt_path, "ground truth")?).input_err("ground truth")?;
        let boxes: Vec<_> = gts.iter().flat_map(|g| g.boxes.iter().map(|b| b.bbox)).collect();
        let clustered = cluster_priors(&boxes, args.scales, args.per_scale, ctx.seed).input_err("clustering")?;
        to_json(&ClusterPriorsReport {
            tool: Tool::current(),
            seed: ctx.seed,
            boxes: boxes.len(),
            config: clustered.to_config(&config).ok(),
            groups: clustered.groups,
        })
    } else {
        let priors = generate_priors(&config).input_err("prior config")?;
        to_json(&SsdPriorsReport { tool: Tool::current(), count: priors.len(), config, priors })
    };
    emit(args.out.as_deref(), &text)
}

pub fn zoo_list(ctx: &Context) -> CmdResult {
    if ctx.json {
        emit(None, &to_json(&MODEL_NAMES))
    } else {
        emit(None, &(MODEL_NAMES.join("\n") + "\n"))
    }
}

pub fn zoo_emit(ctx: &Context, name: &str, out_graph: &Path, out_weights: &Path, scheme: InitScheme) -> CmdResult {
    let (graph, weights) = zoo::build_by_name(name, ctx.seed, scheme).input_err("zoo")?;
    source::write(out_graph, graph.to_json().as_bytes())?;
    source::write(out_weights, &weights.to_bytes())?;
    let costs = cost::report(&graph).internal_err("cost report")?;
    let report = ZooEmitReport {
        tool: Tool::current(),
        seed: ctx.seed,
        model: name.to_string(),
        init: serde_json::to_value(scheme).expect("serializes").as_str().unwrap_or_default().to_string(),
        total_macs: costs.total_macs,
        total_params: costs.total_params,
    };
    if ctx.json {
        emit(None, &to_json(&report))
    } else {
        emit(
            None,
            &format!(
                "{name}: {:.4} {}  {:.4} MParams -> {}, {}\n",
                ctx.units.scale(costs.total_macs) as f64 / 1e9,
                ctx.units.label(),
                costs.total_params as f64 / 1e6,
                out_graph.display(),
                out_weights.display()
            ),
        )
    }
}
