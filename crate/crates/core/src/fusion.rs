//! High-level feature aggregation: sampling strategies that pair RoI
//! features with class prototypes, and the fusion networks that combine a
//! pair into the detection-head input.
//!
//! Three sampling schemes are provided. Balanced class-agnostic sampling
//! gives every foreground RoI one positive and one negative prototype;
//! class-specific pairs only with the RoI's own class; class-agnostic pairs
//! with a uniformly random class.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{affine, Graph, NodeId};
use crate::error::{FpdError, Result};
use crate::types::{ClassId, ClassPrototype, RoIFeature};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

/// Target the pair is trained toward: the RoI's class, or background.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairTarget {
    Class(ClassId),
    Background,
}

/// One (RoI, prototype) training pair.
#[derive(Clone, Debug)]
pub struct SamplePair {
    /// Index into the sampled RoI list (keeps graph wiring cheap).
    pub roi_index: usize,
    pub prototype_label: ClassId,
    pub polarity: Polarity,
    pub target: PairTarget,
    /// Whether the source RoI was a foreground RoI.
    pub roi_is_foreground: bool,
}

/// The RoI-side input to sampling: its assigned ground-truth class, if any.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoiAssignment {
    Foreground(ClassId),
    Background,
}

fn other_classes(classes: &[ClassId], own: ClassId) -> Vec<ClassId> {
    classes.iter().copied().filter(|c| *c != own).collect()
}

/// Balanced class-agnostic sampling: each foreground RoI yields exactly one
/// positive pair (its own class) and one negative pair (another class,
/// uniform); background RoIs yield a single uniformly paired negative.
pub fn bcas_sample(
    assignments: &[RoiAssignment],
    classes: &[ClassId],
    rng: &mut impl Rng,
) -> Result<Vec<SamplePair>> {
    if classes.is_empty() {
        return Err(FpdError::validation("no prototypes available for pairing"));
    }
    let mut pairs = Vec::new();
    for (i, a) in assignments.iter().enumerate() {
        match a {
            RoiAssignment::Foreground(own) => {
                if classes.len() < 2 {
                    return Err(FpdError::validation(
                        "balanced sampling needs a second class for the negative pair",
                    ));
                }
                pairs.push(SamplePair {
                    roi_index: i,
                    prototype_label: *own,
                    polarity: Polarity::Positive,
                    target: PairTarget::Class(*own),
                    roi_is_foreground: true,
                });
                let others = other_classes(classes, *own);
                let neg = others[rng.gen_range(0..others.len())];
                pairs.push(SamplePair {
                    roi_index: i,
                    prototype_label: neg,
                    polarity: Polarity::Negative,
                    target: PairTarget::Background,
                    roi_is_foreground: true,
                });
            }
            RoiAssignment::Background => {
                let label = classes[rng.gen_range(0..classes.len())];
                pairs.push(SamplePair {
                    roi_index: i,
                    prototype_label: label,
                    polarity: Polarity::Negative,
                    target: PairTarget::Background,
                    roi_is_foreground: false,
                });
            }
        }
    }
    Ok(pairs)
}

/// Class-specific sampling: every RoI is paired only with its own class;
/// background RoIs get a uniformly sampled prototype and a background
/// target.
pub fn class_specific_sample(
    assignments: &[RoiAssignment],
    classes: &[ClassId],
    rng: &mut impl Rng,
) -> Result<Vec<SamplePair>> {
    if classes.is_empty() {
        return Err(FpdError::validation("no prototypes available for pairing"));
    }
    let mut pairs = Vec::new();
    for (i, a) in assignments.iter().enumerate() {
        match a {
            RoiAssignment::Foreground(own) => pairs.push(SamplePair {
                roi_index: i,
                prototype_label: *own,
                polarity: Polarity::Positive,
                target: PairTarget::Class(*own),
                roi_is_foreground: true,
            }),
            RoiAssignment::Background => {
                let label = classes[rng.gen_range(0..classes.len())];
                pairs.push(SamplePair {
                    roi_index: i,
                    prototype_label: label,
                    polarity: Polarity::Negative,
                    target: PairTarget::Background,
                    roi_is_foreground: false,
                });
            }
        }
    }
    Ok(pairs)
}

/// Fully class-agnostic sampling: every RoI is paired with one uniformly
/// random prototype. A pair is positive exactly when the draw happens to
/// match the RoI's class.
pub fn class_agnostic_sample(
    assignments: &[RoiAssignment],
    classes: &[ClassId],
    rng: &mut impl Rng,
) -> Result<Vec<SamplePair>> {
    if classes.is_empty() {
        return Err(FpdError::validation("no prototypes available for pairing"));
    }
    let mut pairs = Vec::new();
    for (i, a) in assignments.iter().enumerate() {
        let label = classes[rng.gen_range(0..classes.len())];
        match a {
            RoiAssignment::Foreground(own) if *own == label => pairs.push(SamplePair {
                roi_index: i,
                prototype_label: label,
                polarity: Polarity::Positive,
                target: PairTarget::Class(*own),
                roi_is_foreground: true,
            }),
            RoiAssignment::Foreground(_) => pairs.push(SamplePair {
                roi_index: i,
                prototype_label: label,
                polarity: Polarity::Negative,
                target: PairTarget::Background,
                roi_is_foreground: true,
            }),
            RoiAssignment::Background => pairs.push(SamplePair {
                roi_index: i,
                prototype_label: label,
                polarity: Polarity::Negative,
                target: PairTarget::Background,
                roi_is_foreground: false,
            }),
        }
    }
    Ok(pairs)
}

/// Parameter node bundle for the non-linear fusion network.
pub struct NlfNodes {
    pub f1_w: NodeId,
    pub f1_b: NodeId,
    pub f2_w: NodeId,
    pub f2_b: NodeId,
    pub f3_w: NodeId,
    pub f3_b: NodeId,
    pub agg_w: NodeId,
    pub agg_b: NodeId,
}

/// Non-linear fusion of RoI rows with prototype rows (both (m, 2d)):
/// three rectified paths over multiply/subtract/concat plus a reserved
/// identity path for the RoI features, aggregated by a pure affine layer
/// back to width 2d.
pub fn nlf_fuse(g: &mut Graph, f_roi: NodeId, p_cls: NodeId, nodes: &NlfNodes) -> NodeId {
    let prod = g.mul(f_roi, p_cls);
    let diff = g.sub(f_roi, p_cls);
    let cat = g.concat_cols(&[f_roi, p_cls]);
    let a1 = affine(g, prod, nodes.f1_w, nodes.f1_b);
    let p1 = g.relu(a1);
    let a2 = affine(g, diff, nodes.f2_w, nodes.f2_b);
    let p2 = g.relu(a2);
    let a3 = affine(g, cat, nodes.f3_w, nodes.f3_b);
    let p3 = g.relu(a3);
    let stacked = g.concat_cols(&[p1, p2, p3, f_roi]);
    affine(g, stacked, nodes.agg_w, nodes.agg_b)
}

/// Element-wise multiplicative fusion used by the non-NLF ablation arms.
pub fn elementwise_fuse(g: &mut Graph, f_roi: NodeId, p_cls: NodeId) -> NodeId {
    g.mul(f_roi, p_cls)
}

/// Value-level NLF for a single (RoI, prototype) pair; used by tests and
/// oracle comparisons.
pub struct FusionParams {
    pub f1_w: Array2<f64>,
    pub f1_b: Array2<f64>,
    pub f2_w: Array2<f64>,
    pub f2_b: Array2<f64>,
    pub f3_w: Array2<f64>,
    pub f3_b: Array2<f64>,
    pub agg_w: Array2<f64>,
    pub agg_b: Array2<f64>,
}

impl FusionParams {
    /// Output width of the aggregation layer; must equal the detection-head
    /// input width.
    pub fn output_width(&self) -> usize {
        self.agg_w.ncols()
    }
}

pub fn nlf_fuse_values(
    f_roi: &RoIFeature,
    p_cls: &ClassPrototype,
    params: &FusionParams,
) -> Result<Vec<f64>> {
    if f_roi.vector.len() != p_cls.vector.len() {
        return Err(FpdError::shape(
            "nlf_fuse",
            "roi feature",
            &[1, f_roi.vector.len()],
            "class prototype",
            &[1, p_cls.vector.len()],
        ));
    }
    if f_roi.vector.len() != params.f1_w.nrows() {
        return Err(FpdError::shape(
            "nlf_fuse",
            "roi feature",
            &[1, f_roi.vector.len()],
            "fusion weight F1",
            &[params.f1_w.nrows(), params.f1_w.ncols()],
        ));
    }
    let mut g = Graph::new();
    let roi = g.constant(crate::autodiff::row(&f_roi.vector));
    let proto = g.constant(crate::autodiff::row(&p_cls.vector));
    let nodes = NlfNodes {
        f1_w: g.constant(params.f1_w.clone()),
        f1_b: g.constant(params.f1_b.clone()),
        f2_w: g.constant(params.f2_w.clone()),
        f2_b: g.constant(params.f2_b.clone()),
        f3_w: g.constant(params.f3_w.clone()),
        f3_b: g.constant(params.f3_b.clone()),
        agg_w: g.constant(params.agg_w.clone()),
        agg_b: g.constant(params.agg_b.clone()),
    };
    let out = nlf_fuse(&mut g, roi, proto, &nodes);
    Ok(g.value(out).row(0).to_vec())
}

/// Build prototype lookups keyed by class, validating coverage of the
/// classes pairing will request.
pub fn prototype_table(
    prototypes: &[ClassPrototype],
) -> BTreeMap<ClassId, ClassPrototype> {
    prototypes
        .iter()
        .map(|p| (p.label, p.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::BoundingBox;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fg(c: u32) -> RoiAssignment {
        RoiAssignment::Foreground(ClassId(c))
    }

    #[test]
    fn bcas_gives_one_positive_one_negative_per_foreground() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let classes = vec![ClassId(0), ClassId(1), ClassId(2)];
        let assignments = vec![fg(0); 10];
        let pairs = bcas_sample(&assignments, &classes, &mut rng).unwrap();
        assert_eq!(pairs.len(), 20);
        let pos = pairs.iter().filter(|p| p.polarity == Polarity::Positive).count();
        assert_eq!(pos, 10);
        for i in 0..10 {
            let mine: Vec<_> = pairs.iter().filter(|p| p.roi_index == i).collect();
            assert_eq!(mine.len(), 2);
            assert!(mine.iter().any(|p| p.polarity == Polarity::Positive));
            assert!(mine.iter().any(|p| p.polarity == Polarity::Negative));
        }
    }

    #[test]
    fn bcas_no_foreground_no_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let classes = vec![ClassId(0), ClassId(1)];
        let assignments = vec![RoiAssignment::Background; 4];
        let pairs = bcas_sample(&assignments, &classes, &mut rng).unwrap();
        assert_eq!(pairs.len(), 4);
        assert!(pairs.iter().all(|p| p.polarity == Polarity::Negative));
    }

    #[test]
    fn bcas_single_class_with_foreground_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let classes = vec![ClassId(0)];
        assert!(bcas_sample(&[fg(0)], &classes, &mut rng).is_err());
    }

    #[test]
    fn bcas_negative_draw_is_uniform_over_other_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let classes = vec![ClassId(0), ClassId(1), ClassId(2)];
        let mut count_b = 0usize;
        let n = 10_000;
        for _ in 0..n {
            let pairs = bcas_sample(&[fg(0)], &classes, &mut rng).unwrap();
            let neg = pairs.iter().find(|p| p.polarity == Polarity::Negative).unwrap();
            assert_ne!(neg.prototype_label, ClassId(0));
            if neg.prototype_label == ClassId(1) {
                count_b += 1;
            }
        }
        let freq = count_b as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.05, "negative frequency {freq}");
    }

    #[test]
    fn class_specific_pairs_are_all_positive_on_foreground() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let classes = vec![ClassId(0), ClassId(1)];
        let assignments = vec![fg(0), fg(1), fg(0)];
        let pairs = class_specific_sample(&assignments, &classes, &mut rng).unwrap();
        assert_eq!(pairs.len(), 3);
        assert!(pairs.iter().all(|p| p.polarity == Polarity::Positive));
        assert!(pairs
            .iter()
            .zip(&assignments)
            .all(|(p, a)| matches!(a, RoiAssignment::Foreground(c) if *c == p.prototype_label)));
    }

    #[test]
    fn class_agnostic_positive_rate_matches_uniform_draw() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let classes: Vec<ClassId> = (0..4).map(ClassId).collect();
        let n = 10_000;
        let mut pos = 0usize;
        for _ in 0..n {
            let pairs = class_agnostic_sample(&[fg(2)], &classes, &mut rng).unwrap();
            if pairs[0].polarity == Polarity::Positive {
                pos += 1;
            }
        }
        // p = 1/4; 3 sigma of a binomial proportion with n = 10^4
        let p = 0.25;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let freq = pos as f64 / n as f64;
        assert!((freq - p).abs() < 3.0 * sigma + 1e-9, "freq {freq}");
    }

    #[test]
    fn sampling_is_deterministic_under_a_seed() {
        let classes = vec![ClassId(0), ClassId(1), ClassId(2)];
        let assignments = vec![fg(0), RoiAssignment::Background, fg(2)];
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        let pa = bcas_sample(&assignments, &classes, &mut a).unwrap();
        let pb = bcas_sample(&assignments, &classes, &mut b).unwrap();
        let labels_a: Vec<_> = pa.iter().map(|p| p.prototype_label).collect();
        let labels_b: Vec<_> = pb.iter().map(|p| p.prototype_label).collect();
        assert_eq!(labels_a, labels_b);
    }

    fn residual_passthrough_params(two_d: usize) -> FusionParams {
        // F1..F3 produce zeros; agg selects the trailing f_roi block.
        let mut agg = Array2::<f64>::zeros((4 * two_d, two_d));
        for i in 0..two_d {
            agg[[3 * two_d + i, i]] = 1.0;
        }
        FusionParams {
            f1_w: Array2::zeros((two_d, two_d)),
            f1_b: Array2::zeros((1, two_d)),
            f2_w: Array2::zeros((two_d, two_d)),
            f2_b: Array2::zeros((1, two_d)),
            f3_w: Array2::zeros((2 * two_d, two_d)),
            f3_b: Array2::zeros((1, two_d)),
            agg_w: agg,
            agg_b: Array2::zeros((1, two_d)),
        }
    }

    #[test]
    fn nlf_residual_path_can_pass_roi_through_exactly() {
        let params = residual_passthrough_params(6);
        let roi = RoIFeature {
            vector: vec![1.0, -2.0, 3.0, 0.5, 0.0, -0.125],
            source_box: BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
        };
        let proto = ClassPrototype {
            vector: vec![9.0; 6],
            label: ClassId(1),
        };
        let out = nlf_fuse_values(&roi, &proto, &params).unwrap();
        assert_eq!(out, roi.vector);
    }

    #[test]
    fn nlf_sees_values_not_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let two_d = 4;
        let params = FusionParams {
            f1_w: crate::optim::normal_matrix(&mut rng, two_d, two_d, 0.3),
            f1_b: crate::optim::normal_matrix(&mut rng, 1, two_d, 0.3),
            f2_w: crate::optim::normal_matrix(&mut rng, two_d, two_d, 0.3),
            f2_b: crate::optim::normal_matrix(&mut rng, 1, two_d, 0.3),
            f3_w: crate::optim::normal_matrix(&mut rng, 2 * two_d, two_d, 0.3),
            f3_b: crate::optim::normal_matrix(&mut rng, 1, two_d, 0.3),
            agg_w: crate::optim::normal_matrix(&mut rng, 4 * two_d, two_d, 0.3),
            agg_b: crate::optim::normal_matrix(&mut rng, 1, two_d, 0.3),
        };
        let roi = RoIFeature {
            vector: vec![0.5, -0.5, 1.0, 2.0],
            source_box: BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
        };
        let pa = ClassPrototype {
            vector: vec![1.0, 2.0, 3.0, 4.0],
            label: ClassId(0),
        };
        let pb = ClassPrototype {
            vector: vec![1.0, 2.0, 3.0, 4.0],
            label: ClassId(7),
        };
        let oa = nlf_fuse_values(&roi, &pa, &params).unwrap();
        let ob = nlf_fuse_values(&roi, &pb, &params).unwrap();
        assert_eq!(oa, ob);
    }

    #[test]
    fn nlf_length_mismatch_is_a_shape_error() {
        let params = residual_passthrough_params(4);
        let roi = RoIFeature {
            vector: vec![0.0; 4],
            source_box: BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
        };
        let proto = ClassPrototype {
            vector: vec![0.0; 6],
            label: ClassId(0),
        };
        assert!(nlf_fuse_values(&roi, &proto, &params).is_err());
    }
}
