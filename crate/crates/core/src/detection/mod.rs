//! SSD head: prior boxes, clustered priors, offset coding and NMS.

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod cluster;
mod coding;
mod head;
mod nms;
mod priors;

pub use cluster::{cluster_priors, kmeans_1d, Cluster1d, ClusteredPriors};
pub use coding::{decode, encode, Decoded, VARIANCES};
pub use head::{decode_heads, DecodeParams};
pub use nms::{nms, nms_per_class};
pub use priors::{generate_priors, priors_per_cell, LevelShapes, PriorConfig, PriorLevel, PriorSize};

/// Axis-aligned box in pixels, stored as center and size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    /// From top-left corner and size.
    pub fn from_corner(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { cx: x + w / 2.0, cy: y + h / 2.0, w, h }
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let iw = self.x1().min(other.x1()) - self.x0().max(other.x0());
        let ih = self.y1().min(other.y1()) - self.y0().max(other.y0());
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0() && x <= self.x1() && y >= self.y0() && y <= self.y1()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum DetectionError {
    #[error("invalid prior config: {0}")]
    Config(String),
    #[error("need at least {needed} boxes to cluster, got {got}")]
    TooFewBoxes { needed: usize, got: usize },
    #[error("box {index} has non-positive size")]
    BadBox { index: usize },
    #[error("head output mismatch: {0}")]
    Head(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_cases() {
        let a = BBox::from_corner(0.0, 0.0, 1.0, 1.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::from_corner(5.0, 5.0, 1.0, 1.0)), 0.0);
        let half = BBox::from_corner(0.5, 0.0, 1.0, 1.0);
        assert!((a.iou(&half) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn corner_round_trip() {
        let b = BBox::from_corner(10.0, 20.0, 4.0, 6.0);
        assert_eq!((b.x0(), b.y0(), b.x1(), b.y1()), (10.0, 20.0, 14.0, 26.0));
    }
}
