//! Rotated-BEV IoU matching and average precision.
//!
//! IoU between yaw-oriented rectangles is computed by Sutherland–Hodgman
//! convex clipping followed by the shoelace area formula. AP uses greedy
//! highest-score-first matching per frame and all-point interpolation of the
//! precision-recall curve.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Yaw-oriented rectangle in the BEV plane. `l` extends along the heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevRect {
    pub cx: f64,
    pub cy: f64,
    pub l: f64,
    pub w: f64,
    pub yaw: f64,
}

impl BevRect {
    pub fn new(cx: f64, cy: f64, l: f64, w: f64, yaw: f64) -> Self {
        Self { cx, cy, l, w, yaw }
    }

    pub fn area(&self) -> f64 {
        self.l * self.w
    }

    /// Corners in counterclockwise order.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        let local = [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)];
        local.map(|(x, y)| (self.cx + c * x - s * y, self.cy + s * x + c * y))
    }
}

fn shoelace(poly: &[(f64, f64)]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[(i + 1) % poly.len()];
        acc += x1 * y2 - x2 * y1;
    }
    acc / 2.0
}

/// Clip `subject` against the half-plane left of edge a->b.
fn clip_edge(subject: &[(f64, f64)], a: (f64, f64), b: (f64, f64)) -> Vec<(f64, f64)> {
    let inside = |p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) >= 0.0;
    let mut out = Vec::with_capacity(subject.len() + 2);
    for i in 0..subject.len() {
        let cur = subject[i];
        let prev = subject[(i + subject.len() - 1) % subject.len()];
        let (ci, pi) = (inside(cur), inside(prev));
        if ci != pi {
            // segment crosses the edge line; find intersection
            let dx = cur.0 - prev.0;
            let dy = cur.1 - prev.1;
            let ex = b.0 - a.0;
            let ey = b.1 - a.1;
            let denom = ex * dy - ey * dx;
            if denom.abs() > 1e-300 {
                let t = (ex * (a.1 - prev.1) - ey * (a.0 - prev.0)) / denom;
                out.push((prev.0 + t * dx, prev.1 + t * dy));
            }
        }
        if ci {
            out.push(cur);
        }
    }
    out
}

/// BEV IoU of two oriented rectangles via convex polygon clipping.
pub fn rotated_iou(a: &BevRect, b: &BevRect) -> Result<f64> {
    if a.area() <= 1e-12 || b.area() <= 1e-12 {
        return Err(Error::DegenerateBox);
    }
    let ca = a.corners();
    let cb = b.corners();
    let mut poly: Vec<(f64, f64)> = ca.to_vec();
    for i in 0..4 {
        poly = clip_edge(&poly, cb[i], cb[(i + 1) % 4]);
        if poly.is_empty() {
            return Ok(0.0);
        }
    }
    let inter = shoelace(&poly).abs();
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Evaluation window and IoU thresholds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

impl EvalConfig {
    pub fn new(x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        Self { iou_thresholds: vec![0.5, 0.7], x_range, y_range }
    }

    pub fn validate(&self) -> Result<()> {
        for &t in &self.iou_thresholds {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::config(format!("IoU threshold {t} outside (0, 1]")));
            }
        }
        Ok(())
    }

    pub fn in_range(&self, r: &BevRect) -> bool {
        r.cx >= self.x_range.0
            && r.cx <= self.x_range.1
            && r.cy >= self.y_range.0
            && r.cy <= self.y_range.1
    }
}

/// One frame's detections (rect + confidence) for AP computation.
pub type ScoredRects = Vec<(BevRect, f64)>;

/// Average precision at one IoU threshold over a set of frames.
///
/// Detections are globally sorted by score; matching is greedy per frame with
/// each ground truth matched at most once. All-point interpolation integrates
/// the monotone envelope of the PR curve. Zero ground truths is an error.
pub fn compute_ap(
    dets_per_frame: &[ScoredRects],
    gts_per_frame: &[Vec<BevRect>],
    iou_thresh: f64,
) -> Result<f64> {
    assert_eq!(dets_per_frame.len(), gts_per_frame.len(), "frame count mismatch");
    let n_gt: usize = gts_per_frame.iter().map(|g| g.len()).sum();
    if n_gt == 0 {
        return Err(Error::ZeroGroundTruth);
    }

    let mut flat: Vec<(usize, usize, f64)> = Vec::new();
    for (fi, dets) in dets_per_frame.iter().enumerate() {
        for (di, &(_, score)) in dets.iter().enumerate() {
            flat.push((fi, di, score));
        }
    }
    flat.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });

    let mut matched: Vec<Vec<bool>> = gts_per_frame.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(flat.len());
    for &(fi, di, _) in &flat {
        let det = &dets_per_frame[fi][di].0;
        let mut best = (0.0f64, None);
        for (gi, gt) in gts_per_frame[fi].iter().enumerate() {
            if matched[fi][gi] {
                continue;
            }
            let iou = rotated_iou(det, gt)?;
            if iou > best.0 {
                best = (iou, Some(gi));
            }
        }
        if best.0 >= iou_thresh {
            matched[fi][best.1.unwrap()] = true;
            tp.push(true);
        } else {
            tp.push(false);
        }
    }

    // precision/recall at every cutoff, then all-point interpolation
    let mut precisions = Vec::with_capacity(tp.len());
    let mut recalls = Vec::with_capacity(tp.len());
    let mut cum_tp = 0usize;
    for (i, &is_tp) in tp.iter().enumerate() {
        if is_tp {
            cum_tp += 1;
        }
        precisions.push(cum_tp as f64 / (i + 1) as f64);
        recalls.push(cum_tp as f64 / n_gt as f64);
    }
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for i in 0..recalls.len() {
        ap += (recalls[i] - prev_r) * precisions[i];
        prev_r = recalls[i];
    }
    Ok(ap)
}

/// Range-filter detections and ground truths, then compute AP at each configured threshold.
pub fn evaluate(
    dets_per_frame: &[ScoredRects],
    gts_per_frame: &[Vec<BevRect>],
    config: &EvalConfig,
) -> Result<Vec<(f64, f64)>> {
    config.validate()?;
    let dets: Vec<ScoredRects> = dets_per_frame
        .iter()
        .map(|f| f.iter().filter(|(r, _)| config.in_range(r)).cloned().collect())
        .collect();
    let gts: Vec<Vec<BevRect>> = gts_per_frame
        .iter()
        .map(|f| f.iter().filter(|r| config.in_range(r)).cloned().collect())
        .collect();
    let mut out = Vec::new();
    for &t in &config.iou_thresholds {
        out.push((t, compute_ap(&dets, &gts, t)?));
    }
    Ok(out)
}
