//! Loss assembly for the episodic detector: RPN objectness and box
//! regression, RoI classification over roster-plus-background with
//! class-agnostic box regression on positive pairs, and the meta
//! classification loss on class-level prototypes.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::detector::rpn::RpnTargets;
use crate::fusion::{PairTarget, Polarity, SamplePair};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub rpn_obj: f64,
    pub rpn_box: f64,
    pub roi_cls: f64,
    pub roi_box: f64,
    pub meta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rpn_obj: 1.0,
            rpn_box: 1.0,
            roi_cls: 1.0,
            roi_box: 1.0,
            meta: 1.0,
        }
    }
}

/// Per-component scalar nodes for one query image; missing components are
/// `None` (e.g. no foreground anchors).
#[derive(Default)]
pub struct ImageLossNodes {
    pub rpn_obj: Option<NodeId>,
    pub rpn_box: Option<NodeId>,
    pub roi_cls: Option<NodeId>,
    pub roi_box: Option<NodeId>,
}

/// Final loss values plus the graph node of the weighted total.
pub struct LossReport {
    pub values: BTreeMap<String, f64>,
    pub total: f64,
    /// Set when a query image had no usable targets and contributed zeros.
    pub empty_targets: bool,
}

/// RPN losses from sampled anchor targets. `obj` is (HW, A) logits and
/// `deltas` is (HW, 4A).
pub fn rpn_losses(
    g: &mut Graph,
    obj: NodeId,
    deltas: NodeId,
    targets: &RpnTargets,
    smooth_l1_beta: f64,
) -> (Option<NodeId>, Option<NodeId>) {
    if targets.sampled.is_empty() {
        return (None, None);
    }
    let starts: Vec<(usize, usize)> = targets.sampled.iter().map(|&(row, a)| (row, a)).collect();
    let logits = g.gather_spans(obj, &starts, 1);
    let obj_loss = g.bce_with_logits_mean(logits, &targets.labels);

    let box_loss = if targets.num_fg > 0 {
        let fg_starts: Vec<(usize, usize)> = targets.sampled[..targets.num_fg]
            .iter()
            .map(|&(row, a)| (row, 4 * a))
            .collect();
        let pred = g.gather_spans(deltas, &fg_starts, 4);
        let mut tgt = Array2::<f64>::zeros((targets.num_fg, 4));
        for (i, d) in targets.fg_deltas.iter().enumerate() {
            for j in 0..4 {
                tgt[[i, j]] = d[j];
            }
        }
        Some(g.smooth_l1_mean(pred, tgt, smooth_l1_beta))
    } else {
        None
    };
    (Some(obj_loss), box_loss)
}

/// RoI-head losses over fused pairs. `cls_logits` is (P, C+1) with the
/// background column last; `box_out` is (P, 4) class-agnostic deltas.
/// Positive pairs are trained toward the RoI's class and box; negative
/// pairs toward background with no box loss.
pub fn roi_losses(
    g: &mut Graph,
    cls_logits: NodeId,
    box_out: NodeId,
    pairs: &[SamplePair],
    pair_class_index: &[usize],
    background_index: usize,
    pair_box_deltas: &[Option<[f64; 4]>],
    smooth_l1_beta: f64,
) -> (Option<NodeId>, Option<NodeId>) {
    if pairs.is_empty() {
        return (None, None);
    }
    let targets: Vec<usize> = pairs
        .iter()
        .zip(pair_class_index)
        .map(|(p, &ci)| match p.target {
            PairTarget::Class(_) => ci,
            PairTarget::Background => background_index,
        })
        .collect();
    let cls_loss = g.cross_entropy_mean(cls_logits, &targets);

    let mut pos_rows = Vec::new();
    let mut pos_deltas = Vec::new();
    for (i, (p, d)) in pairs.iter().zip(pair_box_deltas).enumerate() {
        if p.polarity == Polarity::Positive {
            if let Some(d) = d {
                pos_rows.push(i);
                pos_deltas.push(*d);
            }
        }
    }
    let box_loss = if pos_rows.is_empty() {
        None
    } else {
        let pred = g.gather_rows(box_out, &pos_rows);
        let mut tgt = Array2::<f64>::zeros((pos_rows.len(), 4));
        for (i, d) in pos_deltas.iter().enumerate() {
            for j in 0..4 {
                tgt[[i, j]] = d[j];
            }
        }
        Some(g.smooth_l1_mean(pred, tgt, smooth_l1_beta))
    };
    (Some(cls_loss), box_loss)
}

/// Cross entropy of a linear classifier on class prototypes predicting
/// their own class.
pub fn meta_loss(g: &mut Graph, meta_logits: NodeId, class_indices: &[usize]) -> NodeId {
    g.cross_entropy_mean(meta_logits, class_indices)
}

/// Average per-image components, apply weights, and sum into the total.
pub fn total_loss(
    g: &mut Graph,
    per_image: &[ImageLossNodes],
    meta: Option<NodeId>,
    weights: &LossWeights,
) -> (NodeId, LossReport) {
    let n = per_image.len().max(1) as f64;
    let mut values = BTreeMap::new();
    let mut weighted_terms: Vec<NodeId> = Vec::new();
    let mut empty_targets = false;

    let component = |g: &mut Graph,
                         name: &str,
                         nodes: Vec<NodeId>,
                         weight: f64,
                         values: &mut BTreeMap<String, f64>|
     -> Option<NodeId> {
        if nodes.is_empty() {
            values.insert(name.to_string(), 0.0);
            return None;
        }
        let sum = g.add_n(&nodes);
        let mean = g.scale(sum, 1.0 / n);
        values.insert(name.to_string(), g.scalar(mean));
        Some(g.scale(mean, weight))
    };

    let collect = |pick: fn(&ImageLossNodes) -> Option<NodeId>| -> Vec<NodeId> {
        per_image.iter().filter_map(pick).collect()
    };

    for img in per_image {
        if img.rpn_obj.is_none() && img.roi_cls.is_none() {
            empty_targets = true;
        }
    }

    if let Some(t) = component(g, "rpn_obj", collect(|i| i.rpn_obj), weights.rpn_obj, &mut values) {
        weighted_terms.push(t);
    }
    if let Some(t) = component(g, "rpn_box", collect(|i| i.rpn_box), weights.rpn_box, &mut values) {
        weighted_terms.push(t);
    }
    if let Some(t) = component(g, "roi_cls", collect(|i| i.roi_cls), weights.roi_cls, &mut values) {
        weighted_terms.push(t);
    }
    if let Some(t) = component(g, "roi_box", collect(|i| i.roi_box), weights.roi_box, &mut values) {
        weighted_terms.push(t);
    }
    if let Some(m) = meta {
        values.insert("meta".to_string(), g.scalar(m));
        weighted_terms.push(g.scale(m, weights.meta));
    } else {
        values.insert("meta".to_string(), 0.0);
    }

    let total = if weighted_terms.is_empty() {
        g.constant(Array2::zeros((1, 1)))
    } else {
        g.add_n(&weighted_terms)
    };
    let report = LossReport {
        total: g.scalar(total),
        values,
        empty_targets,
    };
    (total, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ClassId;

    #[test]
    fn meta_loss_on_identical_prototypes_with_zero_classifier_is_ln2() {
        let mut g = Graph::new();
        // two identical prototypes through a zero-weight classifier over
        // two classes: uniform softmax
        let logits = g.constant(Array2::zeros((2, 2)));
        let loss = meta_loss(&mut g, logits, &[0, 1]);
        assert!((g.scalar(loss) - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_predictions_give_near_zero_classification_loss() {
        let mut g = Graph::new();
        let mut l = Array2::<f64>::zeros((3, 4));
        for (i, &t) in [0usize, 2, 3].iter().enumerate() {
            l[[i, t]] = 30.0;
        }
        let logits = g.constant(l);
        let loss = g.cross_entropy_mean(logits, &[0, 2, 3]);
        assert!(g.scalar(loss) < 1e-3);
    }

    #[test]
    fn negative_pairs_contribute_no_box_loss() {
        let mut g = Graph::new();
        let cls_logits = g.constant(Array2::zeros((2, 3)));
        let box_out = g.constant(Array2::ones((2, 4)));
        let pairs = vec![
            SamplePair {
                roi_index: 0,
                prototype_label: ClassId(0),
                polarity: Polarity::Positive,
                target: PairTarget::Class(ClassId(0)),
                roi_is_foreground: true,
            },
            SamplePair {
                roi_index: 0,
                prototype_label: ClassId(1),
                polarity: Polarity::Negative,
                target: PairTarget::Background,
                roi_is_foreground: true,
            },
        ];
        let deltas = vec![Some([0.0; 4]), Some([0.0; 4])];
        let (cls, bx) = roi_losses(&mut g, cls_logits, box_out, &pairs, &[0, 0], 2, &deltas, 1.0);
        assert!(cls.is_some());
        // only the positive row enters: loss = smooth_l1(1 vs 0) over 4 elems
        let bl = g.scalar(bx.unwrap());
        assert!((bl - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_inputs_produce_zero_total_with_flag() {
        let mut g = Graph::new();
        let (total, report) = total_loss(
            &mut g,
            &[ImageLossNodes::default()],
            None,
            &LossWeights::default(),
        );
        assert_eq!(g.scalar(total), 0.0);
        assert!(report.empty_targets);
        assert_eq!(report.values["rpn_obj"], 0.0);
    }
}
