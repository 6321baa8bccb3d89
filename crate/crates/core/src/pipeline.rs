//! Ordered pass lists loaded from JSON and applied to a model.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::cost::{self, CostReport};
use crate::executor::{self, ExecError};
use crate::graph::{Graph, GraphError};
use crate::tensor::{Tensor, WeightStore};
use crate::transforms::{self, ChannelSelection, PruneSchedule, RankChoice, RoundRecord, TransformError};

pub const PASS_NAMES: [&str; 9] = [
    "fold_bn",
    "rewrite_stride_to_dilation",
    "subsample_kernel",
    "pca_decompose",
    "random_sample_channels",
    "one_shot_prune",
    "iterative_prune",
    "apply_selection",
    "mask_channels",
];

/// One entry of a pipeline file as written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PassDescriptor {
    pub pass: String,
    #[serde(default = "empty_object")]
    pub params: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckOnly {
    #[serde(default)]
    check_equivalence: bool,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct DilationParams {
    layers: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubsampleParams {
    layer: String,
    factor: usize,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct PcaParams {
    layer: String,
    #[serde(default)]
    rank: Option<usize>,
    #[serde(default)]
    energy_fraction: Option<f64>,
    #[serde(default)]
    check_equivalence: bool,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleParams {
    keep_counts: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectionParams {
    selections: Vec<ChannelSelection>,
}

/// A validated pass with typed parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Pass {
    FoldBn { check_equivalence: bool },
    RewriteStrideToDilation { layers: Vec<String> },
    SubsampleKernel { layer: String, factor: usize },
    PcaDecompose { layer: String, choice: RankChoice, check_equivalence: bool },
    RandomSampleChannels { keep_counts: BTreeMap<String, usize> },
    OneShotPrune(PruneSchedule),
    IterativePrune(PruneSchedule),
    ApplySelection(Vec<ChannelSelection>),
    MaskChannels(Vec<ChannelSelection>),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("pipeline is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("pass {index}: unknown pass `{name}`; known: {}", PASS_NAMES.join(", "))]
    UnknownPass { index: usize, name: String },
    #[error("pass {index} ({name}): bad params: {message}")]
    Params { index: usize, name: String, message: String },
    #[error("pass {index} ({name}) failed: {source}")]
    Transform { index: usize, name: String, source: TransformError },
    #[error("pass {index} ({name}): {source}")]
    Cost { index: usize, name: String, source: GraphError },
    #[error("pass {index} ({name}): equivalence check failed to run: {source}")]
    Exec { index: usize, name: String, source: ExecError },
}

fn params<T: for<'de> Deserialize<'de>>(index: usize, d: &PassDescriptor) -> Result<T, PipelineError> {
    serde_json::from_value(d.params.clone()).map_err(|e| PipelineError::Params {
        index,
        name: d.pass.clone(),
        message: e.to_string(),
    })
}

impl Pass {
    pub fn from_descriptor(index: usize, d: &PassDescriptor) -> Result<Pass, PipelineError> {
        let p = match d.pass.as_str() {
            "fold_bn" => Pass::FoldBn { check_equivalence: params::<CheckOnly>(index, d)?.check_equivalence },
            "rewrite_stride_to_dilation" => Pass::RewriteStrideToDilation { layers: params::<DilationParams>(index, d)?.layers },
            "subsample_kernel" => {
                let p: SubsampleParams = params(index, d)?;
                Pass::SubsampleKernel { layer: p.layer, factor: p.factor }
            }
            "pca_decompose" => {
                let p: PcaParams = params(index, d)?;
                let choice = match (p.rank, p.energy_fraction) {
                    (Some(r), None) => RankChoice::Rank(r),
                    (None, Some(f)) => RankChoice::EnergyFraction(f),
                    _ => {
                        return Err(PipelineError::Params {
                            index,
                            name: d.pass.clone(),
                            message: "give exactly one of `rank` and `energy_fraction`".into(),
                        })
                    }
                };
                Pass::PcaDecompose { layer: p.layer, choice, check_equivalence: p.check_equivalence }
            }
            "random_sample_channels" => {
                Pass::RandomSampleChannels { keep_counts: params::<SampleParams>(index, d)?.keep_counts }
            }
            "one_shot_prune" => Pass::OneShotPrune(params(index, d)?),
            "iterative_prune" => Pass::IterativePrune(params(index, d)?),
            "apply_selection" => Pass::ApplySelection(params::<SelectionParams>(index, d)?.selections),
            "mask_channels" => Pass::MaskChannels(params::<SelectionParams>(index, d)?.selections),
            _ => return Err(PipelineError::UnknownPass { index, name: d.pass.clone() }),
        };
        Ok(p)
    }
}

/// Parsed pipeline: raw descriptors (for hashing and echoing) and typed passes.
#[derive(Clone, Debug, PartialEq)]
pub struct Pipeline {
    pub descriptors: Vec<PassDescriptor>,
    pub passes: Vec<Pass>,
}

impl Pipeline {
    /// Parses and validates every pass before anything runs.
    pub fn parse(text: &str) -> Result<Pipeline, PipelineError> {
        let descriptors: Vec<PassDescriptor> = serde_json::from_str(text)?;
        Self::from_descriptors(descriptors)
    }

    pub fn from_descriptors(descriptors: Vec<PassDescriptor>) -> Result<Pipeline, PipelineError> {
        let passes = descriptors.iter().enumerate().map(|(i, d)| Pass::from_descriptor(i, d)).collect::<Result<_, _>>()?;
        Ok(Pipeline { descriptors, passes })
    }

    /// Canonical JSON of the descriptors, the input to the pipeline hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(&self.descriptors).expect("descriptors serialize")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Equivalence {
    pub max_abs_diff: f64,
    pub input_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassReport {
    pub index: usize,
    pub pass: String,
    pub seed: u64,
    pub cost: CostReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub equivalence: Option<Equivalence>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub history: Vec<RoundRecord>,
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub graph: Graph,
    pub weights: WeightStore,
    pub reports: Vec<PassReport>,
}

/// Failure partway through: reports of the passes that completed, plus the error.
#[derive(Debug)]
pub struct PipelineFailure {
    pub reports: Vec<PassReport>,
    pub error: PipelineError,
}

/// Seeded standard-normal tensor of the graph's input shape.
pub fn random_input(graph: &Graph, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = graph.input_shape.numel();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::from_shape(graph.input_shape, data).expect("sized")
}

fn max_output_diff(
    a: (&Graph, &WeightStore),
    b: (&Graph, &WeightStore),
    input: &Tensor,
) -> Result<f64, ExecError> {
    let oa = executor::run(a.0, a.1, input)?;
    let ob = executor::run(b.0, b.1, input)?;
    let mut worst = 0f64;
    for (id, t) in &oa {
        let other = ob.get(id).ok_or_else(|| ExecError::Shape { layer: id.clone(), detail: "output missing".into() })?;
        let d = t.max_abs_diff(other).ok_or_else(|| ExecError::Shape {
            layer: id.clone(),
            detail: "output shapes differ".into(),
        })?;
        worst = worst.max(d as f64);
    }
    Ok(worst)
}

/// Runs every pass in order. `seed` is used by passes without their own.
pub fn run_pipeline(
    graph: &Graph,
    weights: &WeightStore,
    pipeline: &Pipeline,
    seed: u64,
) -> Result<PipelineOutcome, PipelineFailure> {
    let mut g = graph.clone();
    let mut w = weights.clone();
    let mut reports = Vec::new();
    for (index, (pass, desc)) in pipeline.passes.iter().zip(&pipeline.descriptors).enumerate() {
        let name = desc.pass.clone();
        let pass_seed = desc.seed.unwrap_or(seed);
        let fail = |error: PipelineError, reports: Vec<PassReport>| PipelineFailure { reports, error };
        let terr = |source: TransformError| PipelineError::Transform { index, name: name.clone(), source };
        let mut notes = Vec::new();
        let mut history = Vec::new();
        let mut check = false;
        let step: Result<(Graph, WeightStore), PipelineError> = match pass {
            Pass::FoldBn { check_equivalence } => {
                check = *check_equivalence;
                transforms::fold_bn(&g, &w).map_err(terr).map(|o| {
                    notes.push(format!("folded {}", o.folded.len()));
                    notes.extend(o.skipped.iter().map(|(id, why)| format!("skipped {id}: {why}")));
                    (o.graph, o.weights)
                })
            }
            Pass::RewriteStrideToDilation { layers } => {
                let ids: Vec<&str> = layers.iter().map(String::as_str).collect();
                transforms::rewrite_stride_to_dilation(&g, &ids).map_err(terr).map(|ng| (ng, w.clone()))
            }
            Pass::SubsampleKernel { layer, factor } => transforms::subsample_kernel(&g, &w, layer, *factor).map_err(terr),
            Pass::PcaDecompose { layer, choice, check_equivalence } => {
                check = *check_equivalence;
                transforms::pca_decompose(&g, &w, layer, *choice).map_err(terr)
            }
            Pass::RandomSampleChannels { keep_counts } => {
                transforms::random_sample_channels(&g, &w, keep_counts, pass_seed).map_err(terr)
            }
            Pass::OneShotPrune(s) => transforms::one_shot_prune(&g, &w, s).map_err(terr),
            Pass::IterativePrune(s) => transforms::iterative_prune(&g, &w, s).map_err(terr).map(|o| {
                notes.push(format!("stopped: {:?}", o.stop));
                history = o.history;
                (o.graph, o.weights)
            }),
            Pass::ApplySelection(sel) => transforms::apply_selection(&g, &w, sel).map_err(terr),
            Pass::MaskChannels(sel) => transforms::mask_channels(&g, &w, sel).map_err(terr).map(|nw| (g.clone(), nw)),
        };
        let (ng, nw) = match step {
            Ok(v) => v,
            Err(e) => return Err(fail(e, reports)),
        };
        let equivalence = if check {
            let input = random_input(&g, pass_seed);
            match max_output_diff((&g, &w), (&ng, &nw), &input) {
                Ok(d) => Some(Equivalence { max_abs_diff: d, input_seed: pass_seed }),
                Err(source) => return Err(fail(PipelineError::Exec { index, name, source }, reports)),
            }
        } else {
            None
        };
        let cost = match cost::report(&ng) {
            Ok(c) => c,
            Err(source) => return Err(fail(PipelineError::Cost { index, name, source }, reports)),
        };
        reports.push(PassReport { index, pass: name, seed: pass_seed, cost, equivalence, notes, history });
        g = ng;
        w = nw;
    }
    Ok(PipelineOutcome { graph: g, weights: w, reports })
}
