//! RoI sampling and the detection head plumbing: proposal-to-truth
//! assignment, RoI feature pooling off the high-level map, and decoding of
//! per-class scores into final detections.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::boxes::{clip_box, decode_deltas, descending_order, encode_deltas, iou_matrix, nms};
use crate::error::{FpdError, Result};
use crate::fusion::RoiAssignment;
use crate::types::{BoundingBox, ClassId, Detection, GroundTruth};
use ndarray::Array2;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RoiConfig {
    /// Proposals with best IoU >= this become foreground.
    pub fg_iou: f64,
    /// RoIs sampled per image for the loss.
    pub batch: usize,
    pub fg_fraction: f64,
    /// Bilinear sampling grid per RoI (bins x bins, mean pooled).
    pub bins: usize,
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_dets_per_class: usize,
}

impl RoiConfig {
    pub fn desk_default() -> Self {
        RoiConfig {
            fg_iou: 0.5,
            batch: 16,
            fg_fraction: 0.5,
            bins: 2,
            score_thresh: 0.05,
            nms_iou: 0.5,
            max_dets_per_class: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fg_iou) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(FpdError::validation("roi iou thresholds must lie in [0,1]"));
        }
        if self.bins == 0 || self.batch == 0 {
            return Err(FpdError::validation("roi bins and batch must be positive"));
        }
        Ok(())
    }
}

/// A sampled RoI ready for feature pooling and loss computation.
#[derive(Clone, Debug)]
pub struct SampledRoi {
    pub bbox: BoundingBox,
    pub assignment: RoiAssignment,
    /// Box-regression target relative to the proposal, foreground only.
    pub deltas: Option<[f64; 4]>,
}

/// Match proposals to truths and draw a foreground-biased sample.
/// Ground-truth boxes should be appended to `proposals` by the caller at
/// train time; sampling order is rng-driven and deterministic per seed.
pub fn sample_rois(
    proposals: &[BoundingBox],
    truths: &[GroundTruth],
    cfg: &RoiConfig,
    rng: &mut impl Rng,
) -> Vec<SampledRoi> {
    let truth_boxes: Vec<BoundingBox> = truths.iter().map(|t| t.bbox).collect();
    let mut fg: Vec<(usize, usize)> = Vec::new();
    let mut bg: Vec<usize> = Vec::new();
    if truth_boxes.is_empty() {
        bg.extend(0..proposals.len());
    } else {
        let ious = iou_matrix(proposals, &truth_boxes);
        for (p, row) in ious.iter().enumerate() {
            let (mut best_t, mut best_iou) = (0usize, -1.0f64);
            for (t, &v) in row.iter().enumerate() {
                if v > best_iou {
                    best_iou = v;
                    best_t = t;
                }
            }
            if best_iou >= cfg.fg_iou {
                fg.push((p, best_t));
            } else {
                bg.push(p);
            }
        }
    }

    let max_fg = ((cfg.batch as f64) * cfg.fg_fraction) as usize;
    fg.shuffle(rng);
    fg.truncate(max_fg);
    let want_bg = cfg.batch.saturating_sub(fg.len());
    bg.shuffle(rng);
    bg.truncate(want_bg);

    let mut out = Vec::with_capacity(fg.len() + bg.len());
    for (p, t) in fg {
        out.push(SampledRoi {
            bbox: proposals[p],
            assignment: RoiAssignment::Foreground(truths[t].class_id),
            deltas: Some(encode_deltas(&proposals[p], &truths[t].bbox)),
        });
    }
    for p in bg {
        out.push(SampledRoi {
            bbox: proposals[p],
            assignment: RoiAssignment::Background,
            deltas: None,
        });
    }
    out
}

/// Image-space boxes -> feature-map cell coordinates for RoI pooling.
pub fn boxes_to_map_coords(boxes: &[BoundingBox], stride: usize) -> Vec<[f64; 4]> {
    boxes
        .iter()
        .map(|b| {
            let s = stride as f64;
            [b.x1 / s, b.y1 / s, b.x2 / s, b.y2 / s]
        })
        .collect()
}

/// Decode per-class scores and class-agnostic box deltas into final
/// detections with score thresholding and per-class NMS.
///
/// `scores` is (R, C) of class probabilities in roster order; `deltas` is
/// (R, 4) per RoI (from that class's fused pass, gathered by the caller).
pub fn decode_detections(
    proposals: &[BoundingBox],
    roster: &[ClassId],
    scores: &Array2<f64>,
    deltas_per_class: &[Array2<f64>],
    image_size: (usize, usize),
    cfg: &RoiConfig,
) -> Vec<Detection> {
    let (img_h, img_w) = image_size;
    let mut detections = Vec::new();
    for (c_idx, &class_id) in roster.iter().enumerate() {
        let deltas = &deltas_per_class[c_idx];
        let mut class_boxes = Vec::new();
        let mut class_scores = Vec::new();
        for (r, proposal) in proposals.iter().enumerate() {
            let score = scores[[r, c_idx]];
            if score < cfg.score_thresh {
                continue;
            }
            let d = [deltas[[r, 0]], deltas[[r, 1]], deltas[[r, 2]], deltas[[r, 3]]];
            class_boxes.push(clip_box(&decode_deltas(proposal, &d), img_w as f64, img_h as f64));
            class_scores.push(score);
        }
        let order = descending_order(&class_scores);
        for i in nms(&class_boxes, &order, cfg.nms_iou, cfg.max_dets_per_class) {
            detections.push(Detection {
                bbox: class_boxes[i],
                class_id,
                score: class_scores[i],
            });
        }
    }
    detections
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox { x1, y1, x2, y2 }
    }

    #[test]
    fn gt_proposal_becomes_foreground_with_zero_deltas() {
        let cfg = RoiConfig::desk_default();
        let truths = vec![GroundTruth { bbox: bb(4.0, 4.0, 20.0, 20.0), class_id: ClassId(2) }];
        let proposals = vec![bb(4.0, 4.0, 20.0, 20.0), bb(40.0, 40.0, 60.0, 60.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rois = sample_rois(&proposals, &truths, &cfg, &mut rng);
        let fg: Vec<_> = rois
            .iter()
            .filter(|r| matches!(r.assignment, RoiAssignment::Foreground(_)))
            .collect();
        assert_eq!(fg.len(), 1);
        let d = fg[0].deltas.unwrap();
        assert!(d.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn all_background_when_no_truths() {
        let cfg = RoiConfig::desk_default();
        let proposals = vec![bb(0.0, 0.0, 8.0, 8.0); 5];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rois = sample_rois(&proposals, &[], &cfg, &mut rng);
        assert!(rois.iter().all(|r| r.assignment == RoiAssignment::Background));
    }

    #[test]
    fn decode_keeps_best_box_per_class() {
        let cfg = RoiConfig::desk_default();
        let proposals = vec![bb(8.0, 8.0, 24.0, 24.0), bb(9.0, 9.0, 25.0, 25.0)];
        let roster = vec![ClassId(0)];
        let scores = ndarray::array![[0.9], [0.8]];
        let deltas = vec![Array2::<f64>::zeros((2, 4))];
        let dets = decode_detections(&proposals, &roster, &scores, &deltas, (64, 64), &cfg);
        assert_eq!(dets.len(), 1);
        assert!((dets[0].score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn sub_threshold_scores_are_dropped() {
        let cfg = RoiConfig::desk_default();
        let proposals = vec![bb(8.0, 8.0, 24.0, 24.0)];
        let roster = vec![ClassId(0)];
        let scores = ndarray::array![[0.01]];
        let deltas = vec![Array2::<f64>::zeros((1, 4))];
        let dets = decode_detections(&proposals, &roster, &scores, &deltas, (64, 64), &cfg);
        assert!(dets.is_empty());
    }
}
