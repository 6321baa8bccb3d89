use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::priors::{LevelShapes, PriorConfig, PriorLevel, PriorSize};
use super::{BBox, DetectionError};

const MAX_ROUNDS: usize = 100;

/// Result of [`kmeans_1d`]. Centers are ascending; `assignment[i]` is the
/// cluster of the i-th input value.
#[derive(Clone, Debug, PartialEq)]
pub struct Cluster1d {
    pub centers: Vec<f64>,
    pub assignment: Vec<usize>,
}

fn nearest(centers: &[f64], v: f64) -> usize {
    let mut best = 0;
    for (c, &m) in centers.iter().enumerate() {
        if (v - m).powi(2) < (v - centers[best]).powi(2) {
            best = c;
        }
    }
    best
}

/// Lloyd's k-means on scalars with squared distance. The first center is a
/// seeded draw, the rest are farthest-point picks. Values are sorted first,
/// so the result does not depend on input order.
pub fn kmeans_1d(values: &[f64], k: usize, rng: &mut impl Rng) -> Cluster1d {
    let mut sorted: Vec<(f64, usize)> = values.iter().copied().zip(0..).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let xs: Vec<f64> = sorted.iter().map(|p| p.0).collect();
    if xs.is_empty() || k == 0 {
        return Cluster1d { centers: vec![0.0; k], assignment: vec![0; values.len()] };
    }

    let mut centers = vec![xs[rng.random_range(0..xs.len())]];
    while centers.len() < k {
        let far = (0..xs.len())
            .max_by(|&a, &b| {
                let da = (xs[a] - centers[nearest(&centers, xs[a])]).abs();
                let db = (xs[b] - centers[nearest(&centers, xs[b])]).abs();
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .unwrap();
        centers.push(xs[far]);
    }
    centers.sort_by(f64::total_cmp);

    let mut assign: Vec<usize> = Vec::new();
    for _ in 0..MAX_ROUNDS {
        let mut next: Vec<usize> = xs.iter().map(|&x| nearest(&centers, x)).collect();
        // Re-seed empty clusters from the point farthest from its center,
        // taken from a cluster that can spare it.
        for c in 0..k {
            if next.contains(&c) {
                continue;
            }
            let mut sizes = vec![0usize; k];
            for &a in &next {
                sizes[a] += 1;
            }
            let far = (0..xs.len()).filter(|&i| sizes[next[i]] > 1).max_by(|&a, &b| {
                let da = (xs[a] - centers[next[a]]).abs();
                let db = (xs[b] - centers[next[b]]).abs();
                da.total_cmp(&db).then(b.cmp(&a))
            });
            if let Some(far) = far {
                centers[c] = xs[far];
                next[far] = c;
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<f64> = xs.iter().zip(&next).filter(|(_, &a)| a == c).map(|(&x, _)| x).collect();
            if !members.is_empty() {
                *center = members.iter().sum::<f64>() / members.len() as f64;
            }
        }
        if next == assign {
            break;
        }
        assign = next;
    }

    // Relabel so centers ascend, then map back to input order.
    let mut rank: Vec<usize> = (0..k).collect();
    rank.sort_by(|&a, &b| centers[a].total_cmp(&centers[b]).then(a.cmp(&b)));
    let mut relabel = vec![0; k];
    for (new, &old) in rank.iter().enumerate() {
        relabel[old] = new;
    }
    let mut assignment = vec![0; values.len()];
    for (pos, &(_, orig)) in sorted.iter().enumerate() {
        assignment[orig] = relabel[assign[pos]];
    }
    Cluster1d { centers: rank.iter().map(|&c| centers[c]).collect(), assignment }
}

/// Clustered prior shapes, grouped by scale (ascending), each group's shapes
/// ordered by ascending aspect ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteredPriors {
    pub groups: Vec<Vec<PriorSize>>,
}

impl ClusteredPriors {
    pub fn sizes(&self) -> Vec<PriorSize> {
        self.groups.iter().flatten().copied().collect()
    }

    /// Places group `i` at level `i` of `base`, keeping its feature maps,
    /// image size and variances.
    pub fn to_config(&self, base: &PriorConfig) -> Result<PriorConfig, DetectionError> {
        if base.levels.len() != self.groups.len() {
            return Err(DetectionError::Config(format!(
                "{} scale groups for {} levels",
                self.groups.len(),
                base.levels.len()
            )));
        }
        Ok(PriorConfig {
            levels: base
                .levels
                .iter()
                .zip(&self.groups)
                .map(|(l, g)| PriorLevel { feature_map: l.feature_map, shapes: LevelShapes::Explicit { sizes: g.clone() } })
                .collect(),
            ..base.clone()
        })
    }
}

/// Two-stage clustering of ground-truth shapes: `sqrt(w * h)` into
/// `n_scales` groups, then `ln(w / h)` within each group into `n_per_scale`.
/// Every sub-cluster yields one prior with the group's mean scale and the
/// sub-cluster's mean log ratio.
pub fn cluster_priors(
    gt_boxes: &[BBox],
    n_scales: usize,
    n_per_scale: usize,
    seed: u64,
) -> Result<ClusteredPriors, DetectionError> {
    let needed = n_scales * n_per_scale;
    if gt_boxes.len() < needed || needed == 0 {
        return Err(DetectionError::TooFewBoxes { needed: needed.max(1), got: gt_boxes.len() });
    }
    if let Some(index) = gt_boxes.iter().position(|b| !(b.w > 0.0 && b.h > 0.0 && b.w.is_finite() && b.h.is_finite())) {
        return Err(DetectionError::BadBox { index });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales: Vec<f64> = gt_boxes.iter().map(|b| (b.w * b.h).sqrt()).collect();
    let ratios: Vec<f64> = gt_boxes.iter().map(|b| (b.w / b.h).ln()).collect();
    let by_scale = kmeans_1d(&scales, n_scales, &mut rng);

    let mut groups = Vec::with_capacity(n_scales);
    for g in 0..n_scales {
        let members: Vec<usize> = (0..gt_boxes.len()).filter(|&i| by_scale.assignment[i] == g).collect();
        let mut member_scales: Vec<f64> = members.iter().map(|&i| scales[i]).collect();
        member_scales.sort_by(f64::total_cmp);
        let scale = if members.is_empty() {
            by_scale.centers[g]
        } else {
            member_scales.iter().sum::<f64>() / members.len() as f64
        };
        let member_ratios: Vec<f64> = members.iter().map(|&i| ratios[i]).collect();
        let by_ratio = kmeans_1d(&member_ratios, n_per_scale, &mut rng);
        groups.push(
            by_ratio
                .centers
                .iter()
                .map(|&log_r| PriorSize { w: scale * (log_r / 2.0).exp(), h: scale * (-log_r / 2.0).exp() })
                .collect(),
        );
    }
    Ok(ClusteredPriors { groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kmeans_separates_obvious_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = kmeans_1d(&[10.0, 1.0, 1.2, 10.4, 5.0, 0.8], 3, &mut rng);
        assert_eq!(c.centers.len(), 3);
        assert!((c.centers[0] - 1.0).abs() < 1e-9);
        assert!((c.centers[1] - 5.0).abs() < 1e-9);
        assert!((c.centers[2] - 10.2).abs() < 1e-9);
        assert_eq!(c.assignment, vec![2, 0, 0, 2, 1, 0]);
    }

    #[test]
    fn identical_boxes_give_identical_priors() {
        let boxes = vec![BBox::new(0.0, 0.0, 20.0, 10.0); 12];
        let p = cluster_priors(&boxes, 3, 4, 5).unwrap();
        let sizes = p.sizes();
        assert_eq!(sizes.len(), 12);
        for s in sizes {
            assert!((s.w - 20.0).abs() < 1e-9 && (s.h - 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn too_few_boxes() {
        let boxes = vec![BBox::new(0.0, 0.0, 20.0, 10.0); 11];
        assert_eq!(cluster_priors(&boxes, 3, 4, 5), Err(DetectionError::TooFewBoxes { needed: 12, got: 11 }));
    }

    #[test]
    fn permutation_invariant() {
        let boxes: Vec<BBox> =
            (0..40).map(|i| BBox::new(0.0, 0.0, 5.0 + (i * 7 % 13) as f64 * 3.0, 4.0 + (i * 5 % 11) as f64 * 2.0)).collect();
        let mut rev = boxes.clone();
        rev.reverse();
        assert_eq!(cluster_priors(&boxes, 3, 4, 2).unwrap(), cluster_priors(&rev, 3, 4, 2).unwrap());
    }
}
