use super::BBox;

pub const VARIANCES: [f64; 4] = [0.1, 0.1, 0.2, 0.2];

/// SSD regression targets of `gt` relative to `prior`.
pub fn encode(gt: &BBox, prior: &BBox, variances: &[f64; 4]) -> [f64; 4] {
    [
        (gt.cx - prior.cx) / prior.w / variances[0],
        (gt.cy - prior.cy) / prior.h / variances[1],
        (gt.w / prior.w).ln() / variances[2],
        (gt.h / prior.h).ln() / variances[3],
    ]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decoded {
    pub bbox: BBox,
    /// Set when a decoded side was not a positive finite number and was
    /// replaced by one pixel.
    pub clamped: bool,
}

pub fn decode(offsets: &[f64; 4], prior: &BBox, variances: &[f64; 4]) -> Decoded {
    let cx = prior.cx + offsets[0] * variances[0] * prior.w;
    let cy = prior.cy + offsets[1] * variances[1] * prior.h;
    let mut clamped = false;
    let mut side = |v: f64| {
        if v.is_finite() && v > 0.0 {
            v
        } else {
            clamped = true;
            1.0
        }
    };
    let w = side((offsets[2] * variances[2]).exp() * prior.w);
    let h = side((offsets[3] * variances[3]).exp() * prior.h);
    Decoded { bbox: BBox::new(cx, cy, w, h), clamped }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prior_encodes_to_zero() {
        let p = BBox::new(10.0, 20.0, 15.0, 27.0);
        assert_eq!(encode(&p, &p, &VARIANCES), [0.0; 4]);
        assert_eq!(decode(&[0.0; 4], &p, &VARIANCES), Decoded { bbox: p, clamped: false });
    }

    #[test]
    fn round_trip() {
        let p = BBox::new(100.0, 80.0, 30.0, 20.0);
        let b = BBox::new(93.5, 88.25, 41.0, 12.5);
        let d = decode(&encode(&b, &p, &VARIANCES), &p, &VARIANCES).bbox;
        for (x, y) in [(d.cx, b.cx), (d.cy, b.cy), (d.w, b.w), (d.h, b.h)] {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn underflow_is_clamped() {
        let p = BBox::new(0.0, 0.0, 10.0, 10.0);
        let d = decode(&[0.0, 0.0, -1e6, 0.0], &p, &VARIANCES);
        assert!(d.clamped);
        assert_eq!((d.bbox.w, d.bbox.h), (1.0, 10.0));
    }
}
