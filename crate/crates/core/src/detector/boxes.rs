//! Anchor grid, box delta coding and non-maximum suppression.

use crate::evalkit::match_iou;
use crate::synthgen::BBox;

/// One square anchor per feature cell, centered on the cell.
pub fn anchor_grid(feat_h: usize, feat_w: usize, stride: f64, side: f64) -> Vec<BBox> {
    let half = side / 2.0;
    let mut anchors = Vec::with_capacity(feat_h * feat_w);
    for i in 0..feat_h {
        for j in 0..feat_w {
            let cx = (j as f64 + 0.5) * stride;
            let cy = (i as f64 + 0.5) * stride;
            anchors.push(BBox::new(cx - half, cy - half, cx + half, cy + half));
        }
    }
    anchors
}

/// (dx, dy, dw, dh) taking `reference` onto `target`.
pub fn encode_deltas(target: &BBox, reference: &BBox) -> [f64; 4] {
    let (tcx, tcy) = target.center();
    let (rcx, rcy) = reference.center();
    let rw = reference.width().max(1e-6);
    let rh = reference.height().max(1e-6);
    [
        (tcx - rcx) / rw,
        (tcy - rcy) / rh,
        (target.width().max(1e-6) / rw).ln(),
        (target.height().max(1e-6) / rh).ln(),
    ]
}

const MAX_LOG_SCALE: f64 = 4.0;

pub fn decode_deltas(reference: &BBox, deltas: &[f64; 4]) -> BBox {
    let (rcx, rcy) = reference.center();
    let rw = reference.width().max(1e-6);
    let rh = reference.height().max(1e-6);
    let cx = rcx + deltas[0] * rw;
    let cy = rcy + deltas[1] * rh;
    let w = rw * deltas[2].min(MAX_LOG_SCALE).exp();
    let h = rh * deltas[3].min(MAX_LOG_SCALE).exp();
    BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

pub fn clip_to_image(bbox: &BBox, width: f64, height: f64) -> BBox {
    BBox::new(
        bbox.x0.clamp(0.0, width),
        bbox.y0.clamp(0.0, height),
        bbox.x1.clamp(0.0, width),
        bbox.y1.clamp(0.0, height),
    )
}

/// Greedy score-ordered NMS over `(box, score)` pairs; returns the kept
/// indices, at most `cap`. Ties are broken by input index, so the result is
/// deterministic.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64, cap: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for &i in &order {
        if keep.len() >= cap {
            break;
        }
        if keep
            .iter()
            .all(|&k| match_iou(&boxes[i], &boxes[k]) <= iou_threshold)
        {
            keep.push(i);
        }
    }
    keep
}
