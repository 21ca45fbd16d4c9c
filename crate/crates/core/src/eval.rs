//! Detection evaluation: per-class average precision at a fixed IoU
//! threshold using the all-points interpolation convention, plus means over
//! novel and all classes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::types::{ClassId, Detection, GroundTruth};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassEval {
    pub class_id: u32,
    /// None when the class has no ground truth in the evaluation set.
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_detections: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub per_class: Vec<ClassEval>,
    /// Mean AP over all classes with ground truth.
    pub map_all: f64,
    /// Mean AP over evaluated novel classes.
    pub map_novel: f64,
    pub num_images: usize,
}

/// Greedy per-image matching: detections in descending score order claim
/// the unmatched ground truth with the highest IoU at or above the
/// threshold. Returns (score, is_true_positive) pairs.
pub fn match_detections(
    detections: &[Detection],
    truths: &[GroundTruth],
    class: ClassId,
    iou_threshold: f64,
) -> Vec<(f64, bool)> {
    let mut order: Vec<usize> = (0..detections.len())
        .filter(|&i| detections[i].class_id == class)
        .collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .expect("finite score")
            .then(a.cmp(&b))
    });
    let gt_idx: Vec<usize> = (0..truths.len())
        .filter(|&i| truths[i].class_id == class)
        .collect();
    let mut taken = vec![false; gt_idx.len()];
    let mut out = Vec::with_capacity(order.len());
    for &di in &order {
        let det = &detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (slot, &gi) in gt_idx.iter().enumerate() {
            if taken[slot] {
                continue;
            }
            let iou = det.bbox.iou(&truths[gi].bbox);
            if iou >= iou_threshold && best.map(|(_, b)| iou > b).unwrap_or(true) {
                best = Some((slot, iou));
            }
        }
        match best {
            Some((slot, _)) => {
                taken[slot] = true;
                out.push((det.score, true));
            }
            None => out.push((det.score, false)),
        }
    }
    out
}

/// All-points interpolated average precision from (score, tp) pairs pooled
/// over images. `num_gt` is the total ground-truth count of the class.
pub fn average_precision(matches: &[(f64, bool)], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut sorted = matches.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite score"));

    let mut recalls = Vec::with_capacity(sorted.len());
    let mut precisions = Vec::with_capacity(sorted.len());
    let mut tp = 0usize;
    for (i, (_, is_tp)) in sorted.iter().enumerate() {
        if *is_tp {
            tp += 1;
        }
        recalls.push(tp as f64 / num_gt as f64);
        precisions.push(tp as f64 / (i + 1) as f64);
    }

    // precision envelope from the right, integrate over recall steps
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    for i in (0..sorted.len()).rev() {
        envelope = envelope.max(precisions[i]);
        let prev_recall = if i == 0 { 0.0 } else { recalls[i - 1] };
        ap += envelope * (recalls[i] - prev_recall);
    }
    ap
}

/// Evaluate detections against truths image-by-image for the given classes.
pub fn evaluate_detections(
    detections_per_image: &[Vec<Detection>],
    truths_per_image: &[Vec<GroundTruth>],
    classes: &[ClassId],
    novel_classes: &[ClassId],
    iou_threshold: f64,
) -> EvalReport {
    assert_eq!(detections_per_image.len(), truths_per_image.len());
    let mut per_class = Vec::with_capacity(classes.len());
    let mut matches_by_class: BTreeMap<ClassId, Vec<(f64, bool)>> = BTreeMap::new();
    let mut gt_by_class: BTreeMap<ClassId, usize> = BTreeMap::new();
    let mut det_by_class: BTreeMap<ClassId, usize> = BTreeMap::new();

    for (dets, truths) in detections_per_image.iter().zip(truths_per_image) {
        for class in classes {
            let m = match_detections(dets, truths, *class, iou_threshold);
            det_by_class
                .entry(*class)
                .and_modify(|c| *c += m.len())
                .or_insert(m.len());
            matches_by_class.entry(*class).or_default().extend(m);
            let g = truths.iter().filter(|t| t.class_id == *class).count();
            *gt_by_class.entry(*class).or_insert(0) += g;
        }
    }

    let mut sum_all = 0.0;
    let mut n_all = 0usize;
    let mut sum_novel = 0.0;
    let mut n_novel = 0usize;
    for class in classes {
        let num_gt = gt_by_class.get(class).copied().unwrap_or(0);
        let ap = if num_gt == 0 {
            None
        } else {
            Some(average_precision(
                matches_by_class.get(class).map(|v| v.as_slice()).unwrap_or(&[]),
                num_gt,
            ))
        };
        if let Some(a) = ap {
            sum_all += a;
            n_all += 1;
            if novel_classes.contains(class) {
                sum_novel += a;
                n_novel += 1;
            }
        }
        per_class.push(ClassEval {
            class_id: class.0,
            ap,
            num_gt,
            num_detections: det_by_class.get(class).copied().unwrap_or(0),
        });
    }

    EvalReport {
        iou_threshold,
        per_class,
        map_all: if n_all > 0 { sum_all / n_all as f64 } else { 0.0 },
        map_novel: if n_novel > 0 { sum_novel / n_novel as f64 } else { 0.0 },
        num_images: detections_per_image.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::BoundingBox;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox { x1, y1, x2, y2 }
    }

    fn det(b: BoundingBox, c: u32, s: f64) -> Detection {
        Detection { bbox: b, class_id: ClassId(c), score: s }
    }

    fn gt(b: BoundingBox, c: u32) -> GroundTruth {
        GroundTruth { bbox: b, class_id: ClassId(c) }
    }

    #[test]
    fn perfect_detector_scores_one() {
        let truths = vec![vec![gt(bb(2.0, 2.0, 10.0, 10.0), 0), gt(bb(20.0, 20.0, 30.0, 30.0), 0)]];
        let dets = vec![vec![
            det(bb(2.0, 2.0, 10.0, 10.0), 0, 0.9),
            det(bb(20.0, 20.0, 30.0, 30.0), 0, 0.8),
        ]];
        let r = evaluate_detections(&dets, &truths, &[ClassId(0)], &[], 0.5);
        assert_eq!(r.per_class[0].ap, Some(1.0));
        assert_eq!(r.map_all, 1.0);
    }

    #[test]
    fn silent_detector_scores_zero() {
        let truths = vec![vec![gt(bb(2.0, 2.0, 10.0, 10.0), 0)]];
        let dets = vec![vec![]];
        let r = evaluate_detections(&dets, &truths, &[ClassId(0)], &[], 0.5);
        assert_eq!(r.per_class[0].ap, Some(0.0));
    }

    #[test]
    fn three_detections_two_truths_hand_integral() {
        // ranked: TP, FP, TP over 2 truths
        // precision 1, 1/2, 2/3 ; recall 1/2, 1/2, 1
        // all-points AP = 0.5 * 1 + 0.5 * 2/3 = 5/6
        let matches = vec![(0.9, true), (0.8, false), (0.7, true)];
        let ap = average_precision(&matches, 2);
        assert!((ap - 5.0 / 6.0).abs() < 1e-12, "{ap}");
    }

    #[test]
    fn duplicate_detections_of_one_truth_count_once() {
        let truths = vec![vec![gt(bb(2.0, 2.0, 10.0, 10.0), 0)]];
        let dets = vec![vec![
            det(bb(2.0, 2.0, 10.0, 10.0), 0, 0.9),
            det(bb(2.1, 2.1, 10.1, 10.1), 0, 0.8),
        ]];
        let r = evaluate_detections(&dets, &truths, &[ClassId(0)], &[], 0.5);
        // second detection is a false positive: AP stays 1.0 (envelope)
        assert_eq!(r.per_class[0].ap, Some(1.0));
        let m = match_detections(&dets[0], &truths[0], ClassId(0), 0.5);
        assert_eq!(m.iter().filter(|(_, tp)| *tp).count(), 1);
    }

    #[test]
    fn low_iou_match_is_a_false_positive() {
        let truths = vec![vec![gt(bb(0.0, 0.0, 10.0, 10.0), 0)]];
        let dets = vec![vec![det(bb(6.0, 6.0, 16.0, 16.0), 0, 0.9)]];
        let r = evaluate_detections(&dets, &truths, &[ClassId(0)], &[], 0.5);
        assert_eq!(r.per_class[0].ap, Some(0.0));
    }

    #[test]
    fn novel_mean_covers_only_novel_classes() {
        let truths = vec![vec![gt(bb(0.0, 0.0, 10.0, 10.0), 0), gt(bb(20.0, 0.0, 30.0, 10.0), 1)]];
        let dets = vec![vec![
            det(bb(0.0, 0.0, 10.0, 10.0), 0, 0.9),
            det(bb(50.0, 50.0, 60.0, 60.0), 1, 0.9),
        ]];
        let r = evaluate_detections(&dets, &truths, &[ClassId(0), ClassId(1)], &[ClassId(1)], 0.5);
        assert_eq!(r.map_novel, 0.0);
        assert!((r.map_all - 0.5).abs() < 1e-12);
    }

    #[test]
    fn class_without_truth_is_excluded_from_means() {
        let truths = vec![vec![gt(bb(0.0, 0.0, 10.0, 10.0), 0)]];
        let dets = vec![vec![det(bb(0.0, 0.0, 10.0, 10.0), 0, 0.9)]];
        let r = evaluate_detections(&dets, &truths, &[ClassId(0), ClassId(9)], &[], 0.5);
        assert_eq!(r.per_class[1].ap, None);
        assert_eq!(r.map_all, 1.0);
    }
}
