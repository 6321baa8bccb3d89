use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slimdet::detection::{BBox, Detection, PriorSize};
use slimdet::evaluation::{DetLine, GtBoxLine, GtLine};
use slimdet::graph::{BatchNormSpec, ConvSpec, Graph, LayerNode, Op, PoolSpec, TensorShape, INPUT};
use slimdet::tensor::{Tensor, WeightStore};
use slimdet::transforms::{prunable_units, ChannelSelection};

struct Builder {
    input: TensorShape,
    nodes: Vec<LayerNode>,
    last: String,
    next_id: usize,
}

impl Builder {
    fn new(input: TensorShape) -> Self {
        Builder { input, nodes: Vec::new(), last: INPUT.to_string(), next_id: 0 }
    }

    fn push(&mut self, op: Op, inputs: &[&str]) -> String {
        let id = format!("l{}", self.next_id);
        self.next_id += 1;
        self.nodes.push(LayerNode::new(id.clone(), op, inputs));
        id
    }

    fn graph(&self) -> Graph {
        Graph::new(self.input, self.nodes.clone(), vec![self.last.clone()])
    }

    fn channels(&self) -> Option<usize> {
        self.graph().infer_shapes().ok().map(|s| s[&self.last].c)
    }

    /// Runs `stage`; rolls it back if the graph stops being valid.
    fn attempt(&mut self, stage: impl FnOnce(&mut Builder)) {
        let (saved, last, next) = (self.nodes.len(), self.last.clone(), self.next_id);
        stage(self);
        if self.graph().infer_shapes().is_err() {
            self.nodes.truncate(saved);
            self.last = last;
            self.next_id = next;
        }
    }

    fn conv(&mut self, spec: ConvSpec) {
        let last = self.last.clone();
        self.last = self.push(Op::Conv(spec), &[&last]);
    }

    fn bn_relu(&mut self) {
        let last = self.last.clone();
        let bn = self.push(Op::BatchNorm(BatchNormSpec::default()), &[&last]);
        self.last = self.push(Op::Relu, &[&bn]);
    }

    fn residual(&mut self, rng: &mut ChaCha8Rng, c: usize) {
        let from = self.last.clone();
        let stride = rng.random_range(1..=2);
        let dil = rng.random_range(1..=2);
        let out = if rng.random_bool(0.5) { c } else { rng.random_range(2..=6) };
        self.bn_relu();
        let pre = self.last.clone();
        self.conv(ConvSpec::new(out, 3).stride(stride).pad(dil).dilation(dil));
        self.bn_relu();
        self.conv(ConvSpec::new(out, 3).pad(1).bias(rng.random_bool(0.5)));
        let branch = self.last.clone();
        let shortcut = if stride == 1 && out == c {
            from
        } else {
            self.push(Op::Conv(ConvSpec::new(out, 1).stride(stride)), &[&pre])
        };
        self.last = self.push(Op::EltwiseAdd, &[&branch, &shortcut]);
    }
}

fn random_conv(rng: &mut ChaCha8Rng) -> ConvSpec {
    let k = [1, 2, 3, 5][rng.random_range(0..4)];
    let d = rng.random_range(1..=3);
    let max_pad = d * (k - 1) / 2;
    ConvSpec::new(rng.random_range(2..=6), k)
        .stride(rng.random_range(1..=2))
        .dilation(d)
        .pad(rng.random_range(0..=max_pad))
        .bias(rng.random_bool(0.5))
}

/// Small random network: 3 to 6 stages drawn from plain convs, pools,
/// residual blocks, two-branch concats and depthwise convs, on a
/// 1x3xHxW input with H, W in 16..=40.
pub fn random_graph(seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = TensorShape::new(1, 3, rng.random_range(16..=40), rng.random_range(16..=40));
    let mut b = Builder::new(input);
    let stages = rng.random_range(3..=6);
    for _ in 0..stages {
        let c = b.channels().unwrap_or(3);
        match rng.random_range(0..5) {
            0 => {
                let spec = random_conv(&mut rng);
                let post = rng.random_bool(0.5);
                b.attempt(|b| {
                    b.conv(spec);
                    if post {
                        b.bn_relu();
                    }
                });
            }
            1 => {
                let k = rng.random_range(2..=3);
                let p = PoolSpec::new(k, rng.random_range(1..=2), rng.random_range(0..=k / 2));
                let op = if rng.random_bool(0.5) { Op::MaxPool(p) } else { Op::AvgPool(p) };
                b.attempt(|b| {
                    let last = b.last.clone();
                    b.last = b.push(op, &[&last]);
                });
            }
            2 => {
                let mut sub = rng.clone();
                rng.random::<u64>();
                b.attempt(|b| b.residual(&mut sub, c));
            }
            3 => {
                let (ca, cb) = (rng.random_range(1..=4), rng.random_range(1..=4));
                let k = [3, 5][rng.random_range(0..2)];
                b.attempt(|b| {
                    let last = b.last.clone();
                    let a = b.push(Op::Conv(ConvSpec::new(ca, 1)), &[&last]);
                    let bb = b.push(Op::Conv(ConvSpec::new(cb, k).pad(k / 2)), &[&last]);
                    b.last = b.push(Op::Concat, &[&a, &bb]);
                });
            }
            _ => {
                let s = rng.random_range(1..=2);
                b.attempt(|b| {
                    let last = b.last.clone();
                    b.last = b.push(Op::DepthwiseConv(ConvSpec::new(c, 3).groups(c).pad(1).stride(s)), &[&last]);
                });
            }
        }
    }
    if b.nodes.is_empty() {
        b.conv(ConvSpec::new(4, 3).pad(1));
    }
    b.graph()
}

/// Stem conv, two or three residual blocks and a 1x1 head. The stem and
/// the block convs meeting at the additions form coupled groups.
pub fn residual_graph(seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = TensorShape::new(1, 3, rng.random_range(8..=16), rng.random_range(8..=16));
    let mut b = Builder::new(input);
    let c = rng.random_range(3..=6);
    b.conv(ConvSpec::new(c, 3).pad(1).bias(true));
    for _ in 0..rng.random_range(2..=3) {
        let c = b.channels().unwrap();
        let mut sub = rng.clone();
        rng.random::<u64>();
        b.attempt(|b| b.residual(&mut sub, c));
    }
    b.bn_relu();
    b.conv(ConvSpec::new(2, 1).bias(true));
    b.graph()
}

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform random parameters for every layer of `graph`; batch-norm
/// variances and scales stay in `[0.5, 1.5)`.
pub fn random_weights(graph: &Graph, seed: u64) -> WeightStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = graph.infer_shapes().expect("generator graphs are valid");
    let mut store = WeightStore::new();
    for node in &graph.nodes {
        let cin = shapes[&node.inputs[0]].c;
        match &node.op {
            Op::Conv(s) | Op::DepthwiseConv(s) => {
                let per_group = if matches!(node.op, Op::DepthwiseConv(_)) { 1 } else { cin / s.groups };
                let bound = 1.0 / ((per_group * s.kernel_h * s.kernel_w) as f32).sqrt();
                store.insert(&node.id, "weight", uniform(&mut rng, &[s.out_channels, per_group, s.kernel_h, s.kernel_w], -bound, bound));
                if s.has_bias {
                    store.insert(&node.id, "bias", uniform(&mut rng, &[s.out_channels], -0.5, 0.5));
                }
            }
            Op::BatchNorm(_) => {
                store.insert(&node.id, "mean", uniform(&mut rng, &[cin], -0.5, 0.5));
                store.insert(&node.id, "variance", uniform(&mut rng, &[cin], 0.5, 1.5));
                store.insert(&node.id, "gamma", uniform(&mut rng, &[cin], 0.5, 1.5));
                store.insert(&node.id, "beta", uniform(&mut rng, &[cin], -0.5, 0.5));
            }
            _ => {}
        }
    }
    store
}

/// One selection per member of roughly two thirds of the prunable units,
/// each keeping a random non-empty subset shared across the unit.
pub fn random_selection(graph: &Graph, seed: u64) -> Vec<ChannelSelection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for unit in prunable_units(graph).expect("generator graphs are valid") {
        if rng.random_bool(1.0 / 3.0) {
            continue;
        }
        let keep = rng.random_range(1..=unit.out_channels);
        let mut kept = sample(&mut rng, unit.out_channels, keep).into_vec();
        kept.sort_unstable();
        for m in &unit.members {
            out.push(ChannelSelection { layer_id: m.clone(), kept_indices: kept.clone() });
        }
    }
    out
}

/// Per-image `(detections, ground truth)` for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalInstance {
    pub images: Vec<(Vec<Detection>, Vec<BBox>)>,
}

impl EvalInstance {
    pub fn image_id(i: usize) -> String {
        format!("img{i:03}")
    }

    pub fn gt_lines(&self) -> String {
        let mut s = String::new();
        for (i, (_, gts)) in self.images.iter().enumerate() {
            let line = GtLine {
                image_id: Self::image_id(i),
                boxes: gts.iter().map(|b| GtBoxLine { x: b.x0(), y: b.y0(), w: b.w, h: b.h, class: 1 }).collect(),
                ignore: Vec::new(),
            };
            s.push_str(&serde_json::to_string(&line).unwrap());
            s.push('\n');
        }
        s
    }

    pub fn det_lines(&self) -> String {
        let mut s = String::new();
        for (i, (dets, _)) in self.images.iter().enumerate() {
            for d in dets {
                s.push_str(&serde_json::to_string(&DetLine::from_detection(&Self::image_id(i), d)).unwrap());
                s.push('\n');
            }
        }
        s
    }
}

/// Up to 10 images with up to 8 ground-truth boxes and 20 detections each.
/// Detections are jittered copies of ground truth (some too far off to
/// match) plus clutter; scores are quantised to 0.05 so ties occur.
pub fn random_eval_instance(seed: u64) -> EvalInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    for _ in 0..rng.random_range(1..=10) {
        let gts: Vec<BBox> = (0..rng.random_range(0..=8))
            .map(|_| BBox::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0), rng.random_range(5.0..30.0), rng.random_range(5.0..30.0)))
            .collect();
        let mut dets = Vec::new();
        for g in &gts {
            for _ in 0..rng.random_range(0..=2) {
                let j = rng.random_range(0.0..0.4);
                let bbox = BBox::new(
                    g.cx + g.w * rng.random_range(-j..=j),
                    g.cy + g.h * rng.random_range(-j..=j),
                    g.w * (1.0 + rng.random_range(-j..=j)),
                    g.h * (1.0 + rng.random_range(-j..=j)),
                );
                dets.push(bbox);
            }
        }
        for _ in 0..rng.random_range(0..=4) {
            dets.push(BBox::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0), rng.random_range(5.0..30.0), rng.random_range(5.0..30.0)));
        }
        dets.truncate(20);
        let dets = dets
            .into_iter()
            .map(|bbox| Detection { bbox, score: rng.random_range(1..=20) as f64 * 0.05, class_id: 1 })
            .collect();
        images.push((dets, gts));
    }
    EvalInstance { images }
}

/// Boxes drawn around a 3 x 4 grid of planted shapes (three scales, four
/// aspect ratios), with the planted shapes in the order clustering reports
/// them: ascending scale, then ascending ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedClusters {
    pub boxes: Vec<BBox>,
    pub centers: Vec<PriorSize>,
}

pub const PLANTED_SCALES: [f64; 3] = [12.0, 36.0, 96.0];
pub const PLANTED_RATIOS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

pub fn planted_clusters(seed: u64, per_cluster: usize) -> PlantedClusters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boxes = Vec::new();
    let mut centers = Vec::new();
    for &s in &PLANTED_SCALES {
        for &r in &PLANTED_RATIOS {
            let lr = f64::ln(r);
            centers.push(PriorSize { w: s * (lr / 2.0).exp(), h: s * (-lr / 2.0).exp() });
            for _ in 0..per_cluster / 2 {
                let es = rng.random_range(-0.02..0.02);
                let er = rng.random_range(-0.05..0.05);
                // Mirrored pairs keep the per-cluster log means exact.
                for sign in [1.0, -1.0] {
                    let scale = s * f64::exp(sign * es);
                    let l = lr + sign * er;
                    boxes.push(BBox::new(
                        rng.random_range(0.0..320.0),
                        rng.random_range(0.0..256.0),
                        scale * (l / 2.0).exp(),
                        scale * (-l / 2.0).exp(),
                    ));
                }
            }
        }
    }
    PlantedClusters { boxes, centers }
}
