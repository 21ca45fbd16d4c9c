//! Box arithmetic shared by the RPN and the RoI head: parameterized
//! offsets, clipping, IoU matrices and greedy NMS.

use crate::types::BoundingBox;

/// Encode `target` relative to `anchor` as (tx, ty, tw, th).
pub fn encode_deltas(anchor: &BoundingBox, target: &BoundingBox) -> [f64; 4] {
    let aw = anchor.x2 - anchor.x1;
    let ah = anchor.y2 - anchor.y1;
    let acx = anchor.x1 + 0.5 * aw;
    let acy = anchor.y1 + 0.5 * ah;
    let tw = target.x2 - target.x1;
    let th = target.y2 - target.y1;
    let tcx = target.x1 + 0.5 * tw;
    let tcy = target.y1 + 0.5 * th;
    [
        (tcx - acx) / aw,
        (tcy - acy) / ah,
        (tw / aw).ln(),
        (th / ah).ln(),
    ]
}

/// Apply (tx, ty, tw, th) to an anchor. Offsets are clamped so exp stays
/// bounded on wild early-training outputs.
pub fn decode_deltas(anchor: &BoundingBox, deltas: &[f64]) -> BoundingBox {
    const CLAMP: f64 = 4.0;
    let aw = anchor.x2 - anchor.x1;
    let ah = anchor.y2 - anchor.y1;
    let acx = anchor.x1 + 0.5 * aw;
    let acy = anchor.y1 + 0.5 * ah;
    let cx = acx + deltas[0].clamp(-CLAMP, CLAMP) * aw;
    let cy = acy + deltas[1].clamp(-CLAMP, CLAMP) * ah;
    let w = aw * deltas[2].clamp(-CLAMP, CLAMP).exp();
    let h = ah * deltas[3].clamp(-CLAMP, CLAMP).exp();
    BoundingBox {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
    }
}

/// Clip to image bounds, enforcing a minimal positive extent.
pub fn clip_box(b: &BoundingBox, width: f64, height: f64) -> BoundingBox {
    let x1 = b.x1.clamp(0.0, width - 1.0);
    let y1 = b.y1.clamp(0.0, height - 1.0);
    let x2 = b.x2.clamp(x1 + 1e-3, width);
    let y2 = b.y2.clamp(y1 + 1e-3, height);
    BoundingBox { x1, y1, x2, y2 }
}

/// IoU of every (row: candidate, col: reference) pair.
pub fn iou_matrix(candidates: &[BoundingBox], references: &[BoundingBox]) -> Vec<Vec<f64>> {
    candidates
        .iter()
        .map(|c| references.iter().map(|r| c.iou(r)).collect())
        .collect()
}

/// Greedy non-maximum suppression. `order` must already be sorted by
/// descending score; returns indices of kept boxes in that order.
pub fn nms(boxes: &[BoundingBox], order: &[usize], iou_thresh: f64, keep_at_most: usize) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for &i in order {
        if kept.len() >= keep_at_most {
            break;
        }
        if kept.iter().all(|&j| boxes[i].iou(&boxes[j]) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}

/// Indices sorted by score descending with index order breaking ties, so
/// suppression is fully deterministic.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("non-finite score")
            .then(a.cmp(&b))
    });
    idx
}
