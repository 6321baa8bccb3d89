use std::collections::BTreeMap;

use super::Detection;

fn by_score(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy suppression in descending score order; a box is dropped when its
/// IoU with any kept box exceeds `iou_threshold`. Equal scores keep input
/// order. Class ids are ignored.
pub fn nms(detections: &[Detection], iou_threshold: f64, max_keep: usize) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in by_score(detections) {
        if kept.len() == max_keep {
            break;
        }
        let d = detections[i];
        if kept.iter().all(|k| k.bbox.iou(&d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

/// [`nms`] within each class, then merged by descending score and cut to
/// `max_keep`.
pub fn nms_per_class(detections: &[Detection], iou_threshold: f64, max_keep: usize) -> Vec<Detection> {
    let mut classes: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
    for d in detections {
        classes.entry(d.class_id).or_default().push(*d);
    }
    let mut all: Vec<Detection> =
        classes.values().flat_map(|dets| nms(dets, iou_threshold, max_keep)).collect();
    let order = by_score(&all);
    all = order.into_iter().take(max_keep).map(|i| all[i]).collect();
    all
}
