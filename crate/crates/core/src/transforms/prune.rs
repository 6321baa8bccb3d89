use std::collections::{BTreeMap, HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost;
use crate::graph::{Graph, Op, ShapeMap, INPUT};
use crate::tensor::{Tensor, WeightStore};

use super::{check_valid, weight, TransformError};

/// Output channels of `layer_id` that survive pruning, strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSelection {
    pub layer_id: String,
    pub kept_indices: Vec<usize>,
}

/// Per-filter L1 norm of a convolution's weights.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FilterMetric {
    pub layer_id: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSchedule {
    pub first_half_fraction: f64,
    pub second_half_fraction: f64,
    #[serde(default = "one")]
    pub iterations: usize,
    #[serde(default)]
    pub target_flops: Option<u64>,
}

fn one() -> usize {
    1
}

impl PruneSchedule {
    pub fn new(first_half_fraction: f64, second_half_fraction: f64) -> Self {
        PruneSchedule { first_half_fraction, second_half_fraction, iterations: 1, target_flops: None }
    }

    fn check(&self) -> Result<(), TransformError> {
        for (name, f) in [("first_half_fraction", self.first_half_fraction), ("second_half_fraction", self.second_half_fraction)] {
            if !(0.0..1.0).contains(&f) {
                return Err(TransformError::Schedule(format!("{name} = {f} is outside [0, 1)")));
            }
        }
        if self.iterations == 0 && self.target_flops.is_none() {
            return Err(TransformError::Schedule("iterations must be >= 1 unless a target is set".into()));
        }
        Ok(())
    }
}

/// Convolutions pruned together. Singletons for ordinary layers; coupled
/// residual groups share one mask computed from `metric_members`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PruneUnit {
    pub members: Vec<String>,
    pub metric_members: Vec<String>,
    pub out_channels: usize,
    pub first_half: bool,
}

/// Groups the prunable convolutions of `graph` into units, ordered by the
/// topological position of their earliest member.
///
/// A convolution is prunable when it is a regular (non-depthwise) conv and
/// its channels never reach a graph output, a softmax or a grouped
/// convolution. Coupled groups are prunable only if every member is and the
/// group is not pinned to fixed channels.
pub fn prunable_units(graph: &Graph) -> Result<Vec<PruneUnit>, TransformError> {
    check_valid(graph)?;
    let order = graph.topo_order()?;
    let position: HashMap<&str, usize> =
        order.iter().enumerate().map(|(p, &i)| (graph.nodes[i].id.as_str(), p)).collect();
    let convs: Vec<&str> = order
        .iter()
        .map(|&i| &graph.nodes[i])
        .filter(|n| matches!(n.op, Op::Conv(_)))
        .map(|n| n.id.as_str())
        .collect();
    let eligible: HashSet<&str> = convs.iter().copied().filter(|id| channels_prunable(graph, id)).collect();

    let mut units: Vec<(Vec<String>, usize)> = Vec::new();
    let mut grouped: HashSet<String> = HashSet::new();
    for group in graph.coupled_groups() {
        grouped.extend(group.member_layer_ids.iter().cloned());
        if group.pinned || !group.member_layer_ids.iter().all(|m| eligible.contains(m.as_str())) {
            continue;
        }
        let first = position[group.member_layer_ids[0].as_str()];
        units.push((group.member_layer_ids, first));
    }
    for id in &convs {
        if eligible.contains(id) && !grouped.contains(*id) {
            units.push((vec![id.to_string()], position[id]));
        }
    }
    units.sort_by_key(|(_, p)| *p);

    let mut flat: Vec<(usize, &str)> =
        units.iter().flat_map(|(m, _)| m.iter().map(|id| (position[id.as_str()], id.as_str()))).collect();
    flat.sort();
    let boundary = flat.len().div_ceil(2);
    let first_half: HashSet<&str> = flat[..boundary].iter().map(|&(_, id)| id).collect();

    Ok(units
        .iter()
        .map(|(members, _)| {
            let spec = |id: &str| *graph.node(id).unwrap().op.conv_spec().unwrap();
            let spatial: Vec<String> =
                members.iter().filter(|m| spec(m).kernel_h * spec(m).kernel_w > 1).cloned().collect();
            PruneUnit {
                metric_members: if spatial.is_empty() { members.clone() } else { spatial },
                out_channels: spec(&members[0]).out_channels,
                first_half: first_half.contains(members[0].as_str()),
                members: members.clone(),
            }
        })
        .collect())
}

fn channels_prunable(graph: &Graph, id: &str) -> bool {
    let consumers = graph.consumers();
    let mut stack = vec![id];
    let mut seen = HashSet::new();
    while let Some(cur) = stack.pop() {
        if !seen.insert(cur) {
            continue;
        }
        if graph.outputs.iter().any(|o| o == cur) {
            return false;
        }
        for &next in consumers.get(cur).map(Vec::as_slice).unwrap_or(&[]) {
            let node = graph.node(next).unwrap();
            match &node.op {
                Op::Conv(s) if s.groups > 1 => return false,
                Op::Conv(_) => {}
                Op::Softmax => return false,
                _ => stack.push(next),
            }
        }
    }
    true
}

/// L1 norm of every output filter of a conv or depthwise layer; bias excluded.
pub fn compute_l1_metrics(weights: &WeightStore, layer_id: &str) -> Result<FilterMetric, TransformError> {
    let w = weight(weights, layer_id, "weight")?;
    let row = w.row_len();
    let values = w.data().chunks(row.max(1)).map(|r| r.iter().map(|&v| (v as f64).abs()).sum()).collect();
    Ok(FilterMetric { layer_id: layer_id.to_string(), values })
}

/// Number of channels a unit of `channels` loses at `fraction`:
/// `floor(fraction * channels)`, always leaving at least one.
pub fn prune_count(fraction: f64, channels: usize) -> usize {
    ((fraction * channels as f64).floor() as usize).min(channels.saturating_sub(1))
}

/// Chooses which channels to drop in one round. Only units that lose at least
/// one channel produce selections.
pub fn select_prune(
    graph: &Graph,
    weights: &WeightStore,
    schedule: &PruneSchedule,
) -> Result<Vec<ChannelSelection>, TransformError> {
    schedule.check()?;
    let mut out = Vec::new();
    for unit in prunable_units(graph)? {
        let fraction = if unit.first_half { schedule.first_half_fraction } else { schedule.second_half_fraction };
        let n = prune_count(fraction, unit.out_channels);
        if n == 0 {
            continue;
        }
        let mut score = vec![0f64; unit.out_channels];
        for m in &unit.metric_members {
            let metric = compute_l1_metrics(weights, m)?;
            if metric.values.len() != unit.out_channels {
                return Err(TransformError::InvalidSelection {
                    layer: m.clone(),
                    detail: format!("weight has {} filters, layer declares {}", metric.values.len(), unit.out_channels),
                });
            }
            for (s, v) in score.iter_mut().zip(&metric.values) {
                *s += v;
            }
        }
        let mut ranked: Vec<usize> = (0..unit.out_channels).collect();
        ranked.sort_by(|&a, &b| score[a].total_cmp(&score[b]).then(a.cmp(&b)));
        let mut kept = ranked[n..].to_vec();
        kept.sort_unstable();
        for m in &unit.members {
            out.push(ChannelSelection { layer_id: m.clone(), kept_indices: kept.clone() });
        }
    }
    Ok(out)
}

/// Surviving channels of every node output after `selections`; `None` means
/// all channels are kept.
type KeptMap = HashMap<String, Option<Vec<usize>>>;

fn check_selections(graph: &Graph, selections: &[ChannelSelection]) -> Result<BTreeMap<String, Vec<usize>>, TransformError> {
    let mut map = BTreeMap::new();
    for sel in selections {
        let node = graph.node(&sel.layer_id).ok_or_else(|| TransformError::UnknownLayer(sel.layer_id.clone()))?;
        let Op::Conv(spec) = &node.op else {
            return Err(TransformError::WrongKind { layer: sel.layer_id.clone(), kind: node.op.kind(), expected: "conv" });
        };
        let bad = |detail: String| TransformError::InvalidSelection { layer: sel.layer_id.clone(), detail };
        if sel.kept_indices.is_empty() {
            return Err(TransformError::WouldEmpty(sel.layer_id.clone()));
        }
        if sel.kept_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("kept indices must be strictly increasing".into()));
        }
        if *sel.kept_indices.last().unwrap() >= spec.out_channels {
            return Err(bad(format!("index out of range for {} channels", spec.out_channels)));
        }
        if map.insert(sel.layer_id.clone(), sel.kept_indices.clone()).is_some() {
            return Err(bad("layer selected twice".into()));
        }
    }
    for group in graph.coupled_groups() {
        let chosen: Vec<Option<&Vec<usize>>> = group.member_layer_ids.iter().map(|m| map.get(m)).collect();
        if chosen.iter().all(Option::is_none) {
            continue;
        }
        let first = chosen[0];
        if chosen.iter().any(|c| *c != first) {
            return Err(TransformError::CoupledMismatch { layers: group.member_layer_ids.clone() });
        }
        if group.pinned {
            return Err(TransformError::Unsupported {
                layer: group.member_layer_ids[0].clone(),
                reason: "coupled group is tied to fixed channels".into(),
            });
        }
    }
    Ok(map)
}

fn propagate(graph: &Graph, shapes: &ShapeMap, chosen: &BTreeMap<String, Vec<usize>>) -> Result<KeptMap, TransformError> {
    let mut kept: KeptMap = HashMap::new();
    kept.insert(INPUT.to_string(), None);
    let full = |id: &str, k: &Option<Vec<usize>>| k.clone().unwrap_or_else(|| (0..shapes[id].c).collect());
    for node in graph.sorted_nodes()? {
        let ins: Vec<&Option<Vec<usize>>> = node.inputs.iter().map(|i| &kept[i]).collect();
        let out = match &node.op {
            Op::Conv(s) => {
                if ins[0].is_some() && s.groups > 1 {
                    return Err(TransformError::Unsupported {
                        layer: node.id.clone(),
                        reason: "grouped convolution cannot absorb pruned input channels".into(),
                    });
                }
                chosen.get(&node.id).cloned()
            }
            Op::Softmax => {
                if ins[0].is_some() {
                    return Err(TransformError::Unsupported {
                        layer: node.id.clone(),
                        reason: "softmax input channels cannot be pruned".into(),
                    });
                }
                None
            }
            Op::EltwiseAdd => {
                let first = full(&node.inputs[0], ins[0]);
                for (i, k) in node.inputs.iter().zip(&ins).skip(1) {
                    if full(i, k) != first {
                        return Err(TransformError::CoupledMismatch { layers: node.inputs.clone() });
                    }
                }
                ins[0].clone()
            }
            Op::Concat => {
                if ins.iter().all(|k| k.is_none()) {
                    None
                } else {
                    let mut offset = 0;
                    let mut all = Vec::new();
                    for (i, k) in node.inputs.iter().zip(&ins) {
                        all.extend(full(i, k).into_iter().map(|c| c + offset));
                        offset += shapes[i.as_str()].c;
                    }
                    Some(all)
                }
            }
            _ => ins[0].clone(),
        };
        kept.insert(node.id.clone(), out);
    }
    Ok(kept)
}

/// Removes every channel not listed in `selections`, slicing producer rows,
/// biases, batch-norm parameters, depthwise filters and the input slices of
/// all consumers.
pub fn apply_selection(
    graph: &Graph,
    weights: &WeightStore,
    selections: &[ChannelSelection],
) -> Result<(Graph, WeightStore), TransformError> {
    check_valid(graph)?;
    let chosen = check_selections(graph, selections)?;
    let shapes = graph.infer_shapes()?;
    let kept = propagate(graph, &shapes, &chosen)?;
    let mut g = graph.clone();
    let mut w = weights.clone();
    for node in &mut g.nodes {
        let input_kept = node.inputs.first().and_then(|i| kept[i].as_ref());
        let out_kept = kept[&node.id].as_ref();
        match &mut node.op {
            Op::Conv(s) => {
                let mut t = weight(weights, &node.id, "weight")?.clone();
                if let Some(k) = out_kept {
                    t = t.select(0, k);
                    s.out_channels = k.len();
                    if s.has_bias {
                        let b = weight(weights, &node.id, "bias")?.select(0, k);
                        w.insert(&node.id, "bias", b);
                    }
                }
                if let Some(k) = input_kept {
                    t = t.select(1, k);
                }
                w.insert(&node.id, "weight", t);
            }
            Op::DepthwiseConv(s) => {
                if let Some(k) = out_kept {
                    s.out_channels = k.len();
                    s.groups = k.len();
                    w.insert(&node.id, "weight", weight(weights, &node.id, "weight")?.select(0, k));
                    if s.has_bias {
                        w.insert(&node.id, "bias", weight(weights, &node.id, "bias")?.select(0, k));
                    }
                }
            }
            Op::BatchNorm(_) => {
                if let Some(k) = out_kept {
                    for name in ["mean", "variance", "gamma", "beta"] {
                        w.insert(&node.id, name, weight(weights, &node.id, name)?.select(0, k));
                    }
                }
            }
            _ => {}
        }
    }
    check_valid(&g)?;
    Ok((g, w))
}

/// Equivalence oracle for [`apply_selection`]: keeps every shape but zeroes
/// the filters, biases and batch-norm affine terms of dropped channels, so
/// those channels are identically zero wherever they would have been removed.
pub fn mask_channels(
    graph: &Graph,
    weights: &WeightStore,
    selections: &[ChannelSelection],
) -> Result<WeightStore, TransformError> {
    check_valid(graph)?;
    let chosen = check_selections(graph, selections)?;
    let shapes = graph.infer_shapes()?;
    let kept = propagate(graph, &shapes, &chosen)?;
    let mut w = weights.clone();
    for node in &graph.nodes {
        let Some(k) = kept[&node.id].as_ref() else { continue };
        let keep: HashSet<usize> = k.iter().copied().collect();
        let dropped: Vec<usize> = (0..shapes[&node.id].c).filter(|c| !keep.contains(c)).collect();
        let names: &[&str] = match &node.op {
            Op::Conv(s) | Op::DepthwiseConv(s) if s.has_bias => &["weight", "bias"],
            Op::Conv(_) | Op::DepthwiseConv(_) => &["weight"],
            Op::BatchNorm(_) => &["gamma", "beta"],
            _ => &[],
        };
        if matches!(node.op, Op::Conv(_)) && !chosen.contains_key(&node.id) {
            continue;
        }
        for name in names {
            let t = w.get_mut(&node.id, name).ok_or_else(|| TransformError::MissingWeight {
                layer: node.id.clone(),
                name: name.to_string(),
            })?;
            zero_rows(t, &dropped);
        }
    }
    Ok(w)
}

fn zero_rows(t: &mut Tensor, rows: &[usize]) {
    let row = t.row_len();
    for &r in rows {
        t.data_mut()[r * row..(r + 1) * row].fill(0.0);
    }
}

/// Keeps a uniformly sampled subset of channels per layer. Coupled layers
/// share one sample; a count given for any member applies to the group.
/// All draws come from one generator seeded with `seed`, in topological
/// order of the units.
pub fn random_sample_channels(
    graph: &Graph,
    weights: &WeightStore,
    keep_counts: &BTreeMap<String, usize>,
    seed: u64,
) -> Result<(Graph, WeightStore), TransformError> {
    check_valid(graph)?;
    let units = prunable_units(graph)?;
    let mut covered: HashSet<&str> = HashSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selections = Vec::new();
    for unit in &units {
        let counts: Vec<(&String, usize)> =
            unit.members.iter().filter_map(|m| keep_counts.get(m).map(|&c| (m, c))).collect();
        covered.extend(unit.members.iter().map(String::as_str));
        let Some(&(_, count)) = counts.first() else { continue };
        if counts.iter().any(|&(_, c)| c != count) {
            return Err(TransformError::CoupledMismatch { layers: unit.members.clone() });
        }
        if count == 0 {
            return Err(TransformError::WouldEmpty(counts[0].0.clone()));
        }
        if count > unit.out_channels {
            return Err(TransformError::InvalidSelection {
                layer: counts[0].0.clone(),
                detail: format!("cannot keep {count} of {} channels", unit.out_channels),
            });
        }
        let mut kept = rand::seq::index::sample(&mut rng, unit.out_channels, count).into_vec();
        kept.sort_unstable();
        for m in &unit.members {
            selections.push(ChannelSelection { layer_id: m.clone(), kept_indices: kept.clone() });
        }
    }
    if let Some(id) = keep_counts.keys().find(|k| !covered.contains(k.as_str())) {
        return Err(match graph.node(id) {
            None => TransformError::UnknownLayer(id.clone()),
            Some(_) => TransformError::Unsupported { layer: id.clone(), reason: "layer is not prunable".into() },
        });
    }
    apply_selection(graph, weights, &selections)
}

/// One round of L1 pruning: metrics, selection, removal.
pub fn one_shot_prune(
    graph: &Graph,
    weights: &WeightStore,
    schedule: &PruneSchedule,
) -> Result<(Graph, WeightStore), TransformError> {
    let selections = select_prune(graph, weights, schedule)?;
    apply_selection(graph, weights, &selections)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TargetReached,
    IterationsExhausted,
    /// A round removed nothing, so the target cannot be reached.
    Stalled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub macs: u64,
    pub params: u64,
    pub pruned_channels: usize,
    pub fine_tune: String,
}

#[derive(Clone, Debug)]
pub struct IterativeOutcome {
    pub graph: Graph,
    pub weights: WeightStore,
    pub history: Vec<RoundRecord>,
    pub stop: StopReason,
}

/// Repeats [`one_shot_prune`] until the MAC target is met, the iteration
/// budget runs out or a round removes nothing. With a target set, a zero
/// iteration count means "no round limit".
pub fn iterative_prune(
    graph: &Graph,
    weights: &WeightStore,
    schedule: &PruneSchedule,
) -> Result<IterativeOutcome, TransformError> {
    iterative_prune_with(graph, weights, schedule, |_, _, _| "noop".to_string())
}

/// [`iterative_prune`] with a hook run after each round. The hook's return
/// value is recorded in the round's `fine_tune` field.
pub fn iterative_prune_with(
    graph: &Graph,
    weights: &WeightStore,
    schedule: &PruneSchedule,
    mut hook: impl FnMut(usize, &Graph, &mut WeightStore) -> String,
) -> Result<IterativeOutcome, TransformError> {
    schedule.check()?;
    let mut g = graph.clone();
    let mut w = weights.clone();
    let mut history = Vec::new();
    let macs = |g: &Graph| cost::report(g).map(|r| r.total_macs);
    let reached = |m: u64| schedule.target_flops.is_some_and(|t| m <= t);
    if reached(macs(&g)?) {
        return Ok(IterativeOutcome { graph: g, weights: w, history, stop: StopReason::TargetReached });
    }
    let mut round = 0;
    let stop = loop {
        if schedule.iterations > 0 && round == schedule.iterations {
            break StopReason::IterationsExhausted;
        }
        round += 1;
        let selections = select_prune(&g, &w, schedule)?;
        let pruned: usize = selections
            .iter()
            .map(|s| g.node(&s.layer_id).unwrap().op.conv_spec().unwrap().out_channels - s.kept_indices.len())
            .sum();
        if pruned == 0 {
            break StopReason::Stalled;
        }
        let (ng, mut nw) = apply_selection(&g, &w, &selections)?;
        let note = hook(round, &ng, &mut nw);
        let report = cost::report(&ng)?;
        history.push(RoundRecord {
            round,
            macs: report.total_macs,
            params: report.total_params,
            pruned_channels: pruned,
            fine_tune: note,
        });
        g = ng;
        w = nw;
        if reached(report.total_macs) {
            break StopReason::TargetReached;
        }
    };
    Ok(IterativeOutcome { graph: g, weights: w, history, stop })
}
