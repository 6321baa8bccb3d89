use serde::{Deserialize, Serialize};

use super::{BBox, DetectionError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSize {
    pub w: f64,
    pub h: f64,
}

/// Box shapes placed at every cell of one level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LevelShapes {
    /// SSD rule: square `min_size`, square `sqrt(min_size * max_size)`, then
    /// `(min * sqrt(r), min / sqrt(r))` for each listed ratio `r != 1`.
    Ssd { min_size: f64, max_size: f64, aspect_ratios: Vec<f64> },
    /// Fixed list, e.g. from clustering.
    Explicit { sizes: Vec<PriorSize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorLevel {
    /// `[h, w]` cells.
    pub feature_map: [usize; 2],
    #[serde(flatten)]
    pub shapes: LevelShapes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub levels: Vec<PriorLevel>,
    pub variances: [f64; 4],
    /// `[h, w]` pixels.
    pub image: [usize; 2],
}

pub const DEFAULT_ASPECT_RATIOS: [f64; 5] = [1.0, 2.0, 0.5, 3.0, 1.0 / 3.0];

impl PriorConfig {
    /// Three levels at 32x40, 16x20 and 8x10 for a 256x320 image, with sizes
    /// 15/50, 50/140 and 140/230.
    pub fn three_level_default() -> Self {
        let level = |h, w, min_size, max_size| PriorLevel {
            feature_map: [h, w],
            shapes: LevelShapes::Ssd { min_size, max_size, aspect_ratios: DEFAULT_ASPECT_RATIOS.to_vec() },
        };
        PriorConfig {
            levels: vec![level(32, 40, 15.0, 50.0), level(16, 20, 50.0, 140.0), level(8, 10, 140.0, 230.0)],
            variances: super::VARIANCES,
            image: [256, 320],
        }
    }

    pub fn validate(&self) -> Result<(), DetectionError> {
        let bad = |m: String| Err(DetectionError::Config(m));
        if self.image.contains(&0) {
            return bad("image size must be positive".into());
        }
        if !self.variances.iter().all(|v| v.is_finite() && *v > 0.0) {
            return bad("variances must be positive".into());
        }
        for (i, level) in self.levels.iter().enumerate() {
            if level.feature_map.contains(&0) {
                return bad(format!("level {i}: empty feature map"));
            }
            match &level.shapes {
                LevelShapes::Ssd { min_size, max_size, aspect_ratios } => {
                    if !(*min_size > 0.0 && min_size < max_size && max_size.is_finite()) {
                        return bad(format!("level {i}: need 0 < min_size < max_size"));
                    }
                    if !aspect_ratios.iter().all(|r| r.is_finite() && *r > 0.0) {
                        return bad(format!("level {i}: aspect ratios must be positive"));
                    }
                }
                LevelShapes::Explicit { sizes } => {
                    if sizes.is_empty() || !sizes.iter().all(|s| s.w > 0.0 && s.h > 0.0) {
                        return bad(format!("level {i}: explicit sizes must be non-empty and positive"));
                    }
                }
            }
        }
        Ok(())
    }
}

impl PriorLevel {
    pub fn cell_shapes(&self) -> Vec<PriorSize> {
        match &self.shapes {
            LevelShapes::Ssd { min_size, max_size, aspect_ratios } => {
                let big = (min_size * max_size).sqrt();
                let mut out = vec![PriorSize { w: *min_size, h: *min_size }, PriorSize { w: big, h: big }];
                for &r in aspect_ratios.iter().filter(|&&r| r != 1.0) {
                    out.push(PriorSize { w: min_size * r.sqrt(), h: min_size / r.sqrt() });
                }
                out
            }
            LevelShapes::Explicit { sizes } => sizes.clone(),
        }
    }
}

pub fn priors_per_cell(level: &PriorLevel) -> usize {
    level.cell_shapes().len()
}

/// All priors, level by level, cells row-major, shapes in
/// [`PriorLevel::cell_shapes`] order within a cell.
pub fn generate_priors(config: &PriorConfig) -> Result<Vec<BBox>, DetectionError> {
    config.validate()?;
    let [img_h, img_w] = config.image.map(|v| v as f64);
    let mut out = Vec::new();
    for level in &config.levels {
        let [fh, fw] = level.feature_map;
        let shapes = level.cell_shapes();
        for i in 0..fh {
            let cy = (i as f64 + 0.5) / fh as f64 * img_h;
            for j in 0..fw {
                let cx = (j as f64 + 0.5) / fw as f64 * img_w;
                out.extend(shapes.iter().map(|s| BBox::new(cx, cy, s.w, s.h)));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_first_level() {
        let cfg = PriorConfig::three_level_default();
        let priors = generate_priors(&cfg).unwrap();
        assert_eq!(priors.len(), (32 * 40 + 16 * 20 + 8 * 10) * 6);
        assert_eq!((priors[0].w, priors[0].h), (15.0, 15.0));
        assert!((priors[1].w - 750f64.sqrt()).abs() < 1e-12);
        assert_eq!((priors[0].cx, priors[0].cy), (4.0, 4.0));
        let last_cell = &priors[(32 * 40 - 1) * 6];
        assert_eq!((last_cell.cx, last_cell.cy, last_cell.w), (316.0, 252.0, 15.0));
    }

    #[test]
    fn single_cell_square_only() {
        let cfg = PriorConfig {
            levels: vec![PriorLevel {
                feature_map: [1, 1],
                shapes: LevelShapes::Ssd { min_size: 10.0, max_size: 40.0, aspect_ratios: vec![1.0] },
            }],
            variances: [0.1, 0.1, 0.2, 0.2],
            image: [100, 60],
        };
        let p = generate_priors(&cfg).unwrap();
        assert_eq!(p, vec![BBox::new(30.0, 50.0, 10.0, 10.0), BBox::new(30.0, 50.0, 20.0, 20.0)]);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let cfg = PriorConfig::three_level_default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PriorConfig>(&text).unwrap(), cfg);
        let mut bad = cfg.clone();
        bad.levels[0].shapes = LevelShapes::Ssd { min_size: 50.0, max_size: 15.0, aspect_ratios: vec![] };
        assert!(generate_priors(&bad).is_err());
    }
}
