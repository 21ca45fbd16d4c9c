//! Region proposal network over the aggregated mid-level map: a 3x3 conv
//! trunk with 1x1 objectness and box-delta heads, dense anchors, target
//! assignment and deterministic proposal selection.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::detector::backbone::SpatialNode;
use crate::detector::boxes::{clip_box, decode_deltas, descending_order, encode_deltas, iou_matrix, nms};
use crate::error::{FpdError, Result};
use crate::optim::{he_matrix, FreezePolicy, ParamStore};
use crate::types::BoundingBox;
use ndarray::Array2;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RpnConfig {
    /// Anchor box sides in image pixels.
    pub anchor_scales: Vec<f64>,
    /// Height/width ratios per scale.
    pub anchor_ratios: Vec<f64>,
    pub pre_nms_top_n: usize,
    pub post_nms_train: usize,
    pub post_nms_test: usize,
    pub nms_iou: f64,
    /// Anchors with IoU >= this are positive.
    pub pos_iou: f64,
    /// Anchors with IoU < this are negative.
    pub neg_iou: f64,
    /// Anchors sampled into the loss per image.
    pub batch_per_image: usize,
    pub fg_fraction: f64,
}

impl RpnConfig {
    pub fn desk_default() -> Self {
        RpnConfig {
            anchor_scales: vec![12.0, 20.0, 32.0],
            anchor_ratios: vec![1.0],
            pre_nms_top_n: 256,
            post_nms_train: 24,
            post_nms_test: 12,
            nms_iou: 0.7,
            pos_iou: 0.5,
            neg_iou: 0.3,
            batch_per_image: 48,
            fg_fraction: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in [self.nms_iou, self.pos_iou, self.neg_iou] {
            if !(0.0..=1.0).contains(&t) {
                return Err(FpdError::validation(format!("iou threshold {t} outside [0,1]")));
            }
        }
        if self.pos_iou <= self.neg_iou {
            return Err(FpdError::validation(
                "positive IoU threshold must exceed the negative one",
            ));
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return Err(FpdError::validation("anchor grid must be non-empty"));
        }
        Ok(())
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }
}

/// Dense anchors in image coordinates, row-major over cells then anchors.
pub fn anchor_grid(h: usize, w: usize, stride: usize, cfg: &RpnConfig) -> Vec<BoundingBox> {
    let mut anchors = Vec::with_capacity(h * w * cfg.anchors_per_cell());
    for y in 0..h {
        for x in 0..w {
            let cx = (x as f64 + 0.5) * stride as f64;
            let cy = (y as f64 + 0.5) * stride as f64;
            for scale in &cfg.anchor_scales {
                for ratio in &cfg.anchor_ratios {
                    let bw = scale / ratio.sqrt();
                    let bh = scale * ratio.sqrt();
                    anchors.push(BoundingBox {
                        x1: cx - 0.5 * bw,
                        y1: cy - 0.5 * bh,
                        x2: cx + 0.5 * bw,
                        y2: cy + 0.5 * bh,
                    });
                }
            }
        }
    }
    anchors
}

pub fn init_rpn(d: usize, cfg: &RpnConfig, store: &mut ParamStore, rng: &mut impl Rng) {
    let a = cfg.anchors_per_cell();
    let fan_in = 9 * d;
    store.insert("rpn.conv.w", he_matrix(rng, fan_in, fan_in, d));
    store.insert("rpn.conv.b", Array2::zeros((1, d)));
    store.insert("rpn.obj.w", he_matrix(rng, d, d, a));
    store.insert("rpn.obj.b", Array2::zeros((1, a)));
    store.insert("rpn.box.w", he_matrix(rng, d, d, 4 * a));
    store.insert("rpn.box.b", Array2::zeros((1, 4 * a)));
}

/// Objectness logits (HW, A) and box deltas (HW, 4A).
pub fn rpn_forward(
    g: &mut Graph,
    mid: SpatialNode,
    store: &ParamStore,
    frozen: &FreezePolicy,
) -> (NodeId, NodeId) {
    let cols = g.im2col(mid.id, mid.h, mid.w, 3, 1, 1);
    let w = store.leaf(g, "rpn.conv.w", frozen);
    let b = store.leaf(g, "rpn.conv.b", frozen);
    let trunk = g.matmul(cols, w);
    let trunk = g.add_bias(trunk, b);
    let trunk = g.relu(trunk);

    let ow = store.leaf(g, "rpn.obj.w", frozen);
    let ob = store.leaf(g, "rpn.obj.b", frozen);
    let obj = g.matmul(trunk, ow);
    let obj = g.add_bias(obj, ob);

    let bw = store.leaf(g, "rpn.box.w", frozen);
    let bb = store.leaf(g, "rpn.box.b", frozen);
    let boxes = g.matmul(trunk, bw);
    let boxes = g.add_bias(boxes, bb);
    (obj, boxes)
}

/// Anchor-side training targets.
pub struct RpnTargets {
    /// (cell row, anchor column) of sampled anchors.
    pub sampled: Vec<(usize, usize)>,
    /// 1.0 foreground / 0.0 background per sampled anchor.
    pub labels: Vec<f64>,
    /// Regression targets for the foreground prefix of `sampled`.
    pub fg_deltas: Vec<[f64; 4]>,
    /// Count of foreground anchors at the head of `sampled`.
    pub num_fg: usize,
}

/// Assign anchors to ground truth and sample a balanced training batch.
/// Positives are anchors over the IoU threshold plus each truth's best
/// anchor; sampled foregrounds come first in the result.
pub fn assign_rpn_targets(
    anchors: &[BoundingBox],
    truths: &[BoundingBox],
    anchors_per_cell: usize,
    cfg: &RpnConfig,
    rng: &mut impl Rng,
) -> RpnTargets {
    let mut fg: Vec<(usize, usize)> = Vec::new();
    let mut bg: Vec<usize> = Vec::new();
    if truths.is_empty() {
        return RpnTargets { sampled: vec![], labels: vec![], fg_deltas: vec![], num_fg: 0 };
    }
    let ious = iou_matrix(anchors, truths);

    // best anchor per truth is always positive
    let mut forced: Vec<usize> = Vec::new();
    for t in 0..truths.len() {
        let mut best = 0usize;
        let mut best_iou = -1.0;
        for (a, row) in ious.iter().enumerate() {
            if row[t] > best_iou {
                best_iou = row[t];
                best = a;
            }
        }
        forced.push(best);
    }

    for (a, row) in ious.iter().enumerate() {
        let (mut best_t, mut best_iou) = (0usize, -1.0f64);
        for (t, &v) in row.iter().enumerate() {
            if v > best_iou {
                best_iou = v;
                best_t = t;
            }
        }
        if best_iou >= cfg.pos_iou || forced.contains(&a) {
            fg.push((a, best_t));
        } else if best_iou < cfg.neg_iou {
            bg.push(a);
        }
    }

    let max_fg = ((cfg.batch_per_image as f64) * cfg.fg_fraction) as usize;
    fg.shuffle(rng);
    fg.truncate(max_fg.max(1));
    let want_bg = cfg.batch_per_image.saturating_sub(fg.len());
    bg.shuffle(rng);
    bg.truncate(want_bg);

    let mut sampled = Vec::with_capacity(fg.len() + bg.len());
    let mut labels = Vec::with_capacity(fg.len() + bg.len());
    let mut fg_deltas = Vec::with_capacity(fg.len());
    for &(a, t) in &fg {
        sampled.push((a / anchors_per_cell, a % anchors_per_cell));
        labels.push(1.0);
        fg_deltas.push(encode_deltas(&anchors[a], &truths[t]));
    }
    for &a in &bg {
        sampled.push((a / anchors_per_cell, a % anchors_per_cell));
        labels.push(0.0);
    }
    RpnTargets { sampled, labels, fg_deltas, num_fg: fg.len() }
}

/// Decode, clip, rank and suppress raw RPN output into proposals.
/// Pure value-side computation; proposal boxes are not differentiated.
pub fn generate_proposals(
    obj_logits: &Array2<f64>,
    box_deltas: &Array2<f64>,
    anchors: &[BoundingBox],
    anchors_per_cell: usize,
    image_size: (usize, usize),
    cfg: &RpnConfig,
    post_nms: usize,
) -> Vec<BoundingBox> {
    let (img_h, img_w) = image_size;
    let mut scores = Vec::with_capacity(anchors.len());
    let mut decoded = Vec::with_capacity(anchors.len());
    for (i, anchor) in anchors.iter().enumerate() {
        let row = i / anchors_per_cell;
        let a = i % anchors_per_cell;
        scores.push(obj_logits[[row, a]]);
        let d = [
            box_deltas[[row, 4 * a]],
            box_deltas[[row, 4 * a + 1]],
            box_deltas[[row, 4 * a + 2]],
            box_deltas[[row, 4 * a + 3]],
        ];
        decoded.push(clip_box(&decode_deltas(anchor, &d), img_w as f64, img_h as f64));
    }
    let order: Vec<usize> = descending_order(&scores)
        .into_iter()
        .take(cfg.pre_nms_top_n)
        .filter(|&i| {
            let b = &decoded[i];
            (b.x2 - b.x1) >= 2.0 && (b.y2 - b.y1) >= 2.0
        })
        .collect();
    nms(&decoded, &order, cfg.nms_iou, post_nms)
        .into_iter()
        .map(|i| decoded[i])
        .collect()
}
