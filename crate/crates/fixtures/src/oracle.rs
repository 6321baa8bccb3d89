use slimdet::detection::{BBox, Detection};
use slimdet::graph::ConvSpec;
use slimdet::tensor::Tensor;

/// Direct convolution: one loop per output and kernel coordinate, f64 sums.
/// Shapes are trusted; a mismatch panics.
pub fn oracle_conv(input: &Tensor, spec: &ConvSpec, weight: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let [n, c, h, w] = <[usize; 4]>::try_from(input.dims()).expect("rank-4 input");
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let (sh, sw) = (spec.stride.h, spec.stride.w);
    let (ph, pw) = (spec.pad.h as i64, spec.pad.w as i64);
    let (dh, dw) = (spec.dilation.h, spec.dilation.w);
    let g = spec.groups;
    let oc = spec.out_channels;
    let cin_g = c / g;
    let oc_g = oc / g;
    let oh = (h + 2 * spec.pad.h - dh * (kh - 1) - 1) / sh + 1;
    let ow = (w + 2 * spec.pad.w - dw * (kw - 1) - 1) / sw + 1;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0f32; n * oc * oh * ow];
    for b in 0..n {
        for o in 0..oc {
            let group = o / oc_g;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.map_or(0.0, |t| t.data()[o] as f64);
                    for ci in 0..cin_g {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * sh + ky * dh) as i64 - ph;
                                let ix = (xo * sw + kx * dw) as i64 - pw;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                let cin = group * cin_g + ci;
                                let xv = x[((b * c + cin) * h + iy as usize) * w + ix as usize] as f64;
                                let wv = wt[((o * cin_g + ci) * kh + ky) * kw + kx] as f64;
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * oc + o) * oh + y) * ow + xo] = acc as f32;
                }
            }
        }
    }
    Tensor::new(vec![n, oc, oh, ow], out).unwrap()
}

fn corners(b: &BBox) -> (f64, f64, f64, f64) {
    (b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0)
}

fn overlap(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = corners(a);
    let (bx0, by0, bx1, by1) = corners(b);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// O(n²) suppression. Returns kept indices in visiting order (highest score
/// first, lower index first on ties).
pub fn oracle_nms(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let n = dets.len();
    let mut visited = vec![false; n];
    let mut kept: Vec<usize> = Vec::new();
    for _ in 0..n {
        // Pick the highest unvisited score by scanning everything.
        let mut pick: Option<usize> = None;
        for i in 0..n {
            if visited[i] {
                continue;
            }
            match pick {
                None => pick = Some(i),
                Some(p) if dets[i].score > dets[p].score => pick = Some(i),
                _ => {}
            }
        }
        let i = pick.unwrap();
        visited[i] = true;
        let mut suppressed = false;
        for &k in &kept {
            if overlap(&dets[k].bbox, &dets[i].bbox) > iou_threshold {
                suppressed = true;
            }
        }
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

/// AP of pooled `(detections, ground truth)` images by greedy matching and a
/// Riemann sum over the recall levels `k / n_gt`, each weighted by the best
/// precision reached with at least `k` true positives.
pub fn oracle_ap(images: &[(Vec<Detection>, Vec<BBox>)], iou_threshold: f64) -> f64 {
    // (score, image, detection index, is_tp)
    let mut pooled: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (img, (dets, gts)) in images.iter().enumerate() {
        let mut taken = vec![false; gts.len()];
        let mut visited = vec![false; dets.len()];
        for _ in 0..dets.len() {
            let mut pick: Option<usize> = None;
            for i in 0..dets.len() {
                if !visited[i] && pick.is_none_or(|p| dets[i].score > dets[p].score) {
                    pick = Some(i);
                }
            }
            let i = pick.unwrap();
            visited[i] = true;
            let mut best: Option<usize> = None;
            for g in 0..gts.len() {
                let o = overlap(&dets[i].bbox, &gts[g]);
                if !taken[g] && o >= iou_threshold && best.is_none_or(|b| o > overlap(&dets[i].bbox, &gts[b])) {
                    best = Some(g);
                }
            }
            if let Some(g) = best {
                taken[g] = true;
            }
            pooled.push((dets[i].score, img, i, best.is_some()));
        }
    }
    let n_gt: usize = images.iter().map(|(_, g)| g.len()).sum();
    if n_gt == 0 {
        return 0.0;
    }
    // Insertion sort keeps the oracle free of comparator subtleties.
    let before = |a: &(f64, usize, usize, bool), b: &(f64, usize, usize, bool)| {
        a.0 > b.0 || (a.0 == b.0 && (a.1, a.2) < (b.1, b.2))
    };
    let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
    for p in pooled {
        let pos = ranked.iter().position(|q| before(&p, q)).unwrap_or(ranked.len());
        ranked.insert(pos, p);
    }
    let mut points: Vec<(usize, f64)> = Vec::new();
    let mut tp = 0;
    for (j, r) in ranked.iter().enumerate() {
        if r.3 {
            tp += 1;
        }
        points.push((tp, tp as f64 / (j + 1) as f64));
    }
    let mut ap = 0.0;
    for k in 1..=n_gt {
        let best = points.iter().filter(|(t, _)| *t >= k).map(|(_, p)| *p).fold(0.0, f64::max);
        ap += best / n_gt as f64;
    }
    ap
}
