//! Average precision with ignore regions, and JSON-lines ingestion.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{BBox, Detection};

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Intersection over the area of `det`.
pub fn ioa(det: &BBox, region: &BBox) -> f64 {
    let area = det.area();
    if area <= 0.0 {
        0.0
    } else {
        det.intersection(region) / area
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub boxes: Vec<GtBox>,
    pub ignore_regions: Vec<BBox>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    AllPoint,
    ElevenPoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub ioa_threshold: f64,
    /// Evaluate only this class; `None` ignores class labels.
    #[serde(default)]
    pub class_id: Option<usize>,
    #[serde(default)]
    pub interpolation: Interpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { iou_threshold: 0.7, ioa_threshold: 0.5, class_id: None, interpolation: Interpolation::AllPoint }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub n_gt: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub counts: Counts,
    pub flags: Vec<String>,
}

/// Removed items from [`filter_ignore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IgnoreCounts {
    pub detections: usize,
    pub ground_truth: usize,
}

/// Drops detections covering more than `ioa_threshold` of their own area
/// with any ignore region, and ground-truth boxes centred inside one.
pub fn filter_ignore(
    detections: &[Detection],
    gt: &GroundTruth,
    ioa_threshold: f64,
) -> (Vec<Detection>, GroundTruth, IgnoreCounts) {
    let dets: Vec<Detection> = detections
        .iter()
        .filter(|d| !gt.ignore_regions.iter().any(|r| ioa(&d.bbox, r) > ioa_threshold))
        .copied()
        .collect();
    let boxes: Vec<GtBox> = gt
        .boxes
        .iter()
        .filter(|b| !gt.ignore_regions.iter().any(|r| r.contains_point(b.bbox.cx, b.bbox.cy)))
        .copied()
        .collect();
    let counts = IgnoreCounts { detections: detections.len() - dets.len(), ground_truth: gt.boxes.len() - boxes.len() };
    (dets, GroundTruth { boxes, ..gt.clone() }, counts)
}

/// One image's detections and ground truth, already filtered to the
/// evaluated class.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ImageEval {
    pub detections: Vec<Detection>,
    pub gt: Vec<BBox>,
}

/// Greedy matching of one image: detections in descending score (input
/// order on ties) each take the best-overlapping unmatched box with IoU at
/// least `iou_threshold`. Returns `(score, is_tp, detection index)`.
fn match_image(image: &ImageEval, iou_threshold: f64) -> Vec<(f64, bool, usize)> {
    let mut order: Vec<usize> = (0..image.detections.len()).collect();
    order.sort_by(|&a, &b| image.detections[b].score.total_cmp(&image.detections[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; image.gt.len()];
    order
        .into_iter()
        .map(|i| {
            let d = &image.detections[i];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in image.gt.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let o = d.bbox.iou(gt);
                if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            (d.score, best.is_some(), i)
        })
        .collect()
}

/// Area under the precision envelope over recall.
pub fn all_point_ap(precision: &[f64], recall: &[f64]) -> f64 {
    let mut env = precision.to_vec();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut prev = 0.0;
    let mut ap = 0.0;
    for (r, p) in recall.iter().zip(&env) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Mean over recall levels 0, 0.1, ..., 1 of the best precision reached at
/// or beyond that recall.
pub fn eleven_point_ap(precision: &[f64], recall: &[f64]) -> f64 {
    (0..=10)
        .map(|t| {
            let t = t as f64 / 10.0;
            recall.iter().zip(precision).filter(|(r, _)| **r >= t - 1e-12).map(|(_, p)| *p).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// AP pooled over images. Ties in score keep image order, then detection
/// order within an image.
pub fn average_precision(images: &[ImageEval], iou_threshold: f64, interpolation: Interpolation) -> EvalResult {
    let per_image: Vec<Vec<(f64, bool, usize)>> = images.par_iter().map(|im| match_image(im, iou_threshold)).collect();
    let n_gt: usize = images.iter().map(|im| im.gt.len()).sum();
    let mut pooled: Vec<(f64, bool, usize, usize)> = per_image
        .into_iter()
        .enumerate()
        .flat_map(|(img, m)| m.into_iter().map(move |(s, tp, i)| (s, tp, img, i)))
        .collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));

    let mut flags = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut precision = Vec::with_capacity(pooled.len());
    let mut recall = Vec::with_capacity(pooled.len());
    for &(_, is_tp, _, _) in &pooled {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 });
    }
    let ap = if n_gt == 0 {
        if !pooled.is_empty() {
            flags.push("no ground truth; AP defined as 0".to_string());
        }
        0.0
    } else {
        match interpolation {
            Interpolation::AllPoint => all_point_ap(&precision, &recall),
            Interpolation::ElevenPoint => eleven_point_ap(&precision, &recall),
        }
    };
    EvalResult { ap: ap.clamp(0.0, 1.0), precision, recall, counts: Counts { tp, fp, n_gt }, flags }
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{file} line {line}: {message}")]
    Parse { file: &'static str, line: usize, message: String },
    #[error("detections reference unknown image ids: {}", .0.join(", "))]
    UnknownImages(Vec<String>),
    #[error("ground truth line {line}: image id `{image_id}` appears twice")]
    DuplicateImage { line: usize, image_id: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CornerBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtBoxLine {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub class: usize,
}

/// One line of a ground-truth file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtLine {
    pub image_id: String,
    #[serde(default)]
    pub boxes: Vec<GtBoxLine>,
    #[serde(default)]
    pub ignore: Vec<CornerBox>,
}

/// One line of a detections file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetLine {
    pub image_id: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    pub class: usize,
}

impl DetLine {
    pub fn from_detection(image_id: &str, d: &Detection) -> Self {
        DetLine {
            image_id: image_id.to_string(),
            x: d.bbox.x0(),
            y: d.bbox.y0(),
            w: d.bbox.w,
            h: d.bbox.h,
            score: d.score,
            class: d.class_id,
        }
    }

    pub fn detection(&self) -> Detection {
        Detection { bbox: BBox::from_corner(self.x, self.y, self.w, self.h), score: self.score, class_id: self.class }
    }
}

fn parse_lines<T: for<'de> Deserialize<'de>>(file: &'static str, text: &str) -> Result<Vec<(usize, T)>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|v| (i + 1, v))
                .map_err(|e| EvalError::Parse { file, line: i + 1, message: e.to_string() })
        })
        .collect()
}

fn positive(file: &'static str, line: usize, w: f64, h: f64, finite: &[f64]) -> Result<(), EvalError> {
    if !(w > 0.0 && h > 0.0) || !finite.iter().all(|v| v.is_finite()) {
        return Err(EvalError::Parse { file, line, message: "box needs finite coordinates and positive size".into() });
    }
    Ok(())
}

/// Parses a ground-truth JSON-lines document, keeping file order.
pub fn parse_ground_truth(text: &str) -> Result<Vec<GroundTruth>, EvalError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, g) in parse_lines::<GtLine>("ground truth", text)? {
        if !seen.insert(g.image_id.clone()) {
            return Err(EvalError::DuplicateImage { line, image_id: g.image_id });
        }
        for b in &g.boxes {
            positive("ground truth", line, b.w, b.h, &[b.x, b.y, b.w, b.h])?;
        }
        for b in &g.ignore {
            positive("ground truth", line, b.w, b.h, &[b.x, b.y, b.w, b.h])?;
        }
        out.push(GroundTruth {
            image_id: g.image_id,
            boxes: g.boxes.iter().map(|b| GtBox { bbox: BBox::from_corner(b.x, b.y, b.w, b.h), class_id: b.class }).collect(),
            ignore_regions: g.ignore.iter().map(|b| BBox::from_corner(b.x, b.y, b.w, b.h)).collect(),
        });
    }
    Ok(out)
}

/// Parses a detections JSON-lines document into `(image_id, detection)`
/// pairs in file order.
pub fn parse_detections(text: &str) -> Result<Vec<(String, Detection)>, EvalError> {
    parse_lines::<DetLine>("detections", text)?
        .into_iter()
        .map(|(line, d)| {
            positive("detections", line, d.w, d.h, &[d.x, d.y, d.w, d.h, d.score])?;
            Ok((d.image_id.clone(), d.detection()))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageBreakdown {
    pub image_id: String,
    pub n_gt: usize,
    pub detections: usize,
    pub tp: usize,
    pub fp: usize,
    pub ignored: IgnoreCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetResult {
    pub result: EvalResult,
    pub images: Vec<ImageBreakdown>,
}

/// Filters every image by its ignore regions, then pools all detections into
/// one precision-recall curve.
pub fn evaluate(gts: &[GroundTruth], dets: &[(String, Detection)], config: &EvalConfig) -> Result<DatasetResult, EvalError> {
    let index: HashMap<&str, usize> = gts.iter().enumerate().map(|(i, g)| (g.image_id.as_str(), i)).collect();
    let mut unknown: Vec<String> =
        dets.iter().filter(|(id, _)| !index.contains_key(id.as_str())).map(|(id, _)| id.clone()).collect();
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(EvalError::UnknownImages(unknown));
    }
    let mut per_image: Vec<Vec<Detection>> = vec![Vec::new(); gts.len()];
    for (id, d) in dets {
        if config.class_id.is_none_or(|c| c == d.class_id) {
            per_image[index[id.as_str()]].push(*d);
        }
    }
    let filtered: Vec<(ImageEval, IgnoreCounts)> = gts
        .par_iter()
        .zip(per_image.par_iter())
        .map(|(gt, dets)| {
            let gt = GroundTruth {
                boxes: gt.boxes.iter().filter(|b| config.class_id.is_none_or(|c| c == b.class_id)).copied().collect(),
                ..gt.clone()
            };
            let (d, g, ignored) = filter_ignore(dets, &gt, config.ioa_threshold);
            (ImageEval { detections: d, gt: g.boxes.iter().map(|b| b.bbox).collect() }, ignored)
        })
        .collect();
    let images: Vec<ImageEval> = filtered.iter().map(|(im, _)| im.clone()).collect();
    let result = average_precision(&images, config.iou_threshold, config.interpolation);
    let breakdown = gts
        .iter()
        .zip(&filtered)
        .map(|(gt, (im, ignored))| {
            let tp = match_image(im, config.iou_threshold).iter().filter(|m| m.1).count();
            ImageBreakdown {
                image_id: gt.image_id.clone(),
                n_gt: im.gt.len(),
                detections: im.detections.len(),
                tp,
                fp: im.detections.len() - tp,
                ignored: *ignored,
            }
        })
        .collect();
    Ok(DatasetResult { result, images: breakdown })
}

/// [`evaluate`] over the text of a ground-truth and a detections file.
pub fn evaluate_dataset(gt_text: &str, det_text: &str, config: &EvalConfig) -> Result<DatasetResult, EvalError> {
    let gts = parse_ground_truth(gt_text)?;
    let dets = parse_detections(det_text)?;
    evaluate(&gts, &dets, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f64, score: f64) -> Detection {
        Detection { bbox: BBox::from_corner(x, 0.0, 10.0, 10.0), score, class_id: 1 }
    }

    fn gt(x: f64) -> BBox {
        BBox::from_corner(x, 0.0, 10.0, 10.0)
    }

    #[test]
    fn perfect_and_empty() {
        let im = ImageEval { detections: vec![det(0.0, 0.9), det(20.0, 0.8)], gt: vec![gt(0.0), gt(20.0)] };
        assert_eq!(average_precision(std::slice::from_ref(&im), 0.7, Interpolation::AllPoint).ap, 1.0);
        let none = ImageEval { detections: vec![], gt: im.gt.clone() };
        assert_eq!(average_precision(&[none], 0.7, Interpolation::AllPoint).ap, 0.0);
    }

    #[test]
    fn envelope_area() {
        // TP, FP, TP over 2 GT: precision 1, 1/2, 2/3; recall 1/2, 1/2, 1.
        let im = ImageEval { detections: vec![det(0.0, 0.9), det(50.0, 0.8), det(20.0, 0.7)], gt: vec![gt(0.0), gt(20.0)] };
        let r = average_precision(&[im], 0.7, Interpolation::AllPoint);
        assert!((r.ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(r.counts, Counts { tp: 2, fp: 1, n_gt: 2 });
    }

    #[test]
    fn no_ground_truth_is_flagged() {
        let r = average_precision(&[ImageEval { detections: vec![det(0.0, 0.5)], gt: vec![] }], 0.7, Interpolation::AllPoint);
        assert_eq!(r.ap, 0.0);
        assert_eq!(r.flags.len(), 1);
    }

    #[test]
    fn ignore_rule() {
        let g = GroundTruth {
            image_id: "a".into(),
            boxes: vec![GtBox { bbox: gt(0.0), class_id: 1 }, GtBox { bbox: gt(100.0), class_id: 1 }],
            ignore_regions: vec![BBox::from_corner(95.0, 0.0, 30.0, 30.0)],
        };
        // Fully inside, and 3 of 10 columns inside (IoA 0.3).
        let dets = vec![det(100.0, 0.9), det(88.0, 0.5)];
        let (d, g2, c) = filter_ignore(&dets, &g, 0.5);
        assert_eq!(d, vec![dets[1]]);
        assert_eq!(g2.boxes.len(), 1);
        assert_eq!(c, IgnoreCounts { detections: 1, ground_truth: 1 });
        let none = GroundTruth { ignore_regions: vec![], ..g.clone() };
        assert_eq!(filter_ignore(&dets, &none, 0.5).0, dets);
    }

    #[test]
    fn dataset_errors_carry_context() {
        let gt = "{\"image_id\":\"a\",\"boxes\":[{\"x\":0,\"y\":0,\"w\":10,\"h\":10,\"class\":1}]}\n";
        let bad = "{\"image_id\":\"a\",\"x\":0,\"y\":0,\"w\":10,\"h\":10,\"score\":0.5,\"class\":1}\nnot json\n";
        assert!(matches!(evaluate_dataset(gt, bad, &EvalConfig::default()), Err(EvalError::Parse { line: 2, .. })));
        let unknown = "{\"image_id\":\"zz\",\"x\":0,\"y\":0,\"w\":10,\"h\":10,\"score\":0.5,\"class\":1}\n";
        assert_eq!(
            evaluate_dataset(gt, unknown, &EvalConfig::default()),
            Err(EvalError::UnknownImages(vec!["zz".into()]))
        );
        let good = "{\"image_id\":\"a\",\"x\":0,\"y\":0,\"w\":10,\"h\":10,\"score\":0.5,\"class\":1}\n";
        assert_eq!(evaluate_dataset(gt, good, &EvalConfig::default()).unwrap().result.ap, 1.0);
        assert_eq!(evaluate_dataset(gt, "", &EvalConfig::default()).unwrap().result.ap, 0.0);
    }

    #[test]
    fn eleven_point_on_perfect_curve() {
        assert!((eleven_point_ap(&[1.0, 1.0], &[0.5, 1.0]) - 1.0).abs() < 1e-12);
    }
}
