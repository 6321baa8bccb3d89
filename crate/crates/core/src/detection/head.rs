use serde::{Deserialize, Serialize};

use super::coding::decode;
use super::nms::nms_per_class;
use super::priors::PriorConfig;
use super::{Detection, DetectionError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeParams {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_keep: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams { score_threshold: 0.01, nms_iou: 0.45, max_keep: 200 }
    }
}

/// Turns per-level `(class scores, box offsets)` head outputs into
/// detections, one list per batch item.
///
/// Channel `p * classes + k` of a score map is the logit of class `k` for
/// prior `p` of the cell; channel `p * 4 + t` of an offset map is its
/// `t`-th regression target. Class 0 is background. Scores are a softmax
/// over each prior's logits.
pub fn decode_heads(
    heads: &[(&Tensor, &Tensor)],
    config: &PriorConfig,
    params: &DecodeParams,
) -> Result<Vec<Vec<Detection>>, DetectionError> {
    config.validate()?;
    if heads.len() != config.levels.len() {
        return Err(DetectionError::Head(format!("{} head pairs for {} levels", heads.len(), config.levels.len())));
    }
    let priors = super::generate_priors(config)?;
    let mut batch = None;
    let mut candidates: Vec<Vec<Detection>> = Vec::new();
    let mut offset = 0;
    for (level_idx, ((cls, loc), level)) in heads.iter().zip(&config.levels).enumerate() {
        let shape_of = |t: &Tensor| {
            t.shape4().map_err(|e| DetectionError::Head(format!("level {level_idx}: {e}")))
        };
        let (cs, ls) = (shape_of(cls)?, shape_of(loc)?);
        let per_cell = level.cell_shapes().len();
        let [fh, fw] = level.feature_map;
        if (cs.h, cs.w) != (fh, fw) || (ls.h, ls.w) != (fh, fw) || cs.n != ls.n {
            return Err(DetectionError::Head(format!("level {level_idx}: map sizes do not match {fh}x{fw}")));
        }
        if cs.c % per_cell != 0 || cs.c / per_cell < 2 || ls.c != per_cell * 4 {
            return Err(DetectionError::Head(format!(
                "level {level_idx}: {} score / {} offset channels for {per_cell} priors per cell",
                cs.c, ls.c
            )));
        }
        if *batch.get_or_insert(cs.n) != cs.n {
            return Err(DetectionError::Head("batch sizes differ between levels".into()));
        }
        if candidates.is_empty() {
            candidates = vec![Vec::new(); cs.n];
        }
        let classes = cs.c / per_cell;
        let plane = fh * fw;
        for (n, out) in candidates.iter_mut().enumerate() {
            let cls_base = n * cs.c * plane;
            let loc_base = n * ls.c * plane;
            for cell in 0..plane {
                for p in 0..per_cell {
                    let logit = |k: usize| cls.data()[cls_base + (p * classes + k) * plane + cell] as f64;
                    let max = (0..classes).map(logit).fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = (0..classes).map(|k| (logit(k) - max).exp()).sum();
                    let prior = &priors[offset + cell * per_cell + p];
                    let mut t = [0f64; 4];
                    for (k, v) in t.iter_mut().enumerate() {
                        *v = loc.data()[loc_base + (p * 4 + k) * plane + cell] as f64;
                    }
                    let bbox = decode(&t, prior, &config.variances).bbox;
                    for k in 1..classes {
                        let score = (logit(k) - max).exp() / denom;
                        if score >= params.score_threshold {
                            out.push(Detection { bbox, score, class_id: k });
                        }
                    }
                }
            }
        }
        offset += plane * per_cell;
    }
    Ok(candidates.iter().map(|c| nms_per_class(c, params.nms_iou, params.max_keep)).collect())
}
