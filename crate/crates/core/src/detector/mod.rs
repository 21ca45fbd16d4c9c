//! The episodic two-branch detector: shared backbone, mid-level prototype
//! aggregation, RPN on the aggregated map, RoI pooling off the high-level
//! map, prototype fusion and the detection head.

pub mod backbone;
pub mod boxes;
pub mod losses;
pub mod roihead;
pub mod rpn;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{affine, row, Graph, NodeId};
use crate::error::{FpdError, Result};
use crate::ffa;
use crate::fusion::{
    bcas_sample, class_agnostic_sample, class_specific_sample, elementwise_fuse, nlf_fuse,
    NlfNodes, RoiAssignment, SamplePair,
};
use crate::optim::{he_matrix, normal_matrix, FreezePolicy, ParamStore};
use crate::transfer::{self, ShotWeightMode};
use crate::types::{
    BoundingBox, ClassId, Detection, Episode, FeatureMap, ImageTensor, ProjectionParams,
    PrototypeBank, PrototypeSet, QuerySample,
};

use backbone::{extract_high, extract_mid, init_backbone, BackboneConfig, SpatialNode};
use losses::{total_loss, ImageLossNodes, LossReport, LossWeights};
use roihead::{boxes_to_map_coords, decode_detections, sample_rois, RoiConfig};
use rpn::{anchor_grid, assign_rpn_targets, generate_proposals, init_rpn, rpn_forward, RpnConfig};

/// Which ablation arm of the detector is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Class-specific pairing, multiplicative fusion, no mid-level
    /// aggregation.
    Baseline,
    /// Balanced sampling, multiplicative fusion.
    Bcas,
    /// Balanced sampling plus the non-linear fusion head.
    BcasNlf,
    /// Balanced sampling, non-linear fusion and fine-grained prototype
    /// aggregation.
    Full,
    /// Like `Full` but with dense query-support matching instead of
    /// distilled prototypes.
    DenseMatch,
}

impl Variant {
    pub fn uses_ffa(&self) -> bool {
        matches!(self, Variant::Full)
    }

    pub fn uses_dense(&self) -> bool {
        matches!(self, Variant::DenseMatch)
    }

    pub fn uses_nlf(&self) -> bool {
        matches!(self, Variant::BcasNlf | Variant::Full | Variant::DenseMatch)
    }

    pub fn uses_bcas(&self) -> bool {
        !matches!(self, Variant::Baseline)
    }

    pub fn parse(name: &str) -> Result<Variant> {
        match name {
            "baseline" => Ok(Variant::Baseline),
            "bcas" => Ok(Variant::Bcas),
            "bcas+nlf" => Ok(Variant::BcasNlf),
            "full" => Ok(Variant::Full),
            "dense-match" => Ok(Variant::DenseMatch),
            other => Err(FpdError::validation(format!("unknown variant '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Bcas => "bcas",
            Variant::BcasNlf => "bcas+nlf",
            Variant::Full => "full",
            Variant::DenseMatch => "dense-match",
        }
    }
}

/// How training pairs are sampled; derived from the variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingScheme {
    ClassSpecific,
    Balanced,
    ClassAgnostic,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub d_prime: usize,
    /// Feature queries per class.
    pub n_queries: usize,
    /// Background prototype rows.
    pub n_bg: usize,
    pub variant: Variant,
    pub backbone: BackboneConfig,
    pub rpn: RpnConfig,
    pub roi: RoiConfig,
    pub loss_weights: LossWeights,
    pub shot_weight_mode: ShotWeightMode,
    pub rpn_smooth_l1_beta: f64,
    pub roi_smooth_l1_beta: f64,
}

impl ModelConfig {
    pub fn desk_default(d: usize, variant: Variant) -> Self {
        ModelConfig {
            d,
            d_prime: d,
            n_queries: 5,
            n_bg: 5,
            variant,
            backbone: BackboneConfig::desk_default(d),
            rpn: RpnConfig::desk_default(),
            roi: RoiConfig::desk_default(),
            loss_weights: LossWeights::default(),
            shot_weight_mode: ShotWeightMode::PerQuery,
            rpn_smooth_l1_beta: 0.1,
            roi_smooth_l1_beta: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.rpn.validate()?;
        self.roi.validate()?;
        if self.backbone.d() != self.d {
            return Err(FpdError::validation(format!(
                "backbone mid width {} does not match d = {}",
                self.backbone.d(),
                self.d
            )));
        }
        if self.n_queries == 0 || self.n_bg == 0 {
            return Err(FpdError::validation("n_queries and n_bg must be >= 1"));
        }
        Ok(())
    }
}

/// The detector: a parameter store plus the class table its heads know.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    /// Classes the classification/meta heads can predict, in fixed order.
    pub classes: Vec<ClassId>,
    pub store: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, classes: Vec<ClassId>, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes.is_empty() {
            return Err(FpdError::validation("model needs at least one class"));
        }
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();

        init_backbone(&config.backbone, 3, &mut store, &mut rng);
        init_rpn(config.d, &config.rpn, &mut store, &mut rng);

        let (d, dp) = (config.d, config.d_prime);
        if config.variant.uses_ffa() {
            store.insert("ffa.w", normal_matrix(&mut rng, d, dp, (1.0 / d as f64).sqrt()));
            store.insert("ffa.w_prime", normal_matrix(&mut rng, d, dp, (1.0 / d as f64).sqrt()));
            store.insert("ffa.alpha", Array2::zeros((1, 1)));
            store.insert("ffa.bg", normal_matrix(&mut rng, config.n_bg, d, 0.1));
            for c in &classes {
                store.insert(
                    &format!("ffa.query.{c}"),
                    normal_matrix(&mut rng, config.n_queries, dp, 0.1),
                );
                store.insert(&format!("ffa.e_cls.{c}"), Array2::zeros((1, d)));
            }
        }
        if config.variant.uses_dense() {
            store.insert("dense.w", normal_matrix(&mut rng, d, dp, (1.0 / d as f64).sqrt()));
            store.insert("dense.w_prime", normal_matrix(&mut rng, d, dp, (1.0 / d as f64).sqrt()));
            store.insert("dense.alpha", Array2::zeros((1, 1)));
        }

        let two_d = 2 * d;
        if config.variant.uses_nlf() {
            store.insert("nlf.f1.w", he_matrix(&mut rng, two_d, two_d, two_d));
            store.insert("nlf.f1.b", Array2::zeros((1, two_d)));
            store.insert("nlf.f2.w", he_matrix(&mut rng, two_d, two_d, two_d));
            store.insert("nlf.f2.b", Array2::zeros((1, two_d)));
            store.insert("nlf.f3.w", he_matrix(&mut rng, 2 * two_d, 2 * two_d, two_d));
            store.insert("nlf.f3.b", Array2::zeros((1, two_d)));
            store.insert("nlf.agg.w", he_matrix(&mut rng, 4 * two_d, 4 * two_d, two_d));
            store.insert("nlf.agg.b", Array2::zeros((1, two_d)));
        }

        store.insert("head.fc.w", he_matrix(&mut rng, two_d, two_d, two_d));
        store.insert("head.fc.b", Array2::zeros((1, two_d)));
        store.insert(
            "head.cls.w",
            normal_matrix(&mut rng, two_d, classes.len() + 1, 0.01),
        );
        store.insert("head.cls.b", Array2::zeros((1, classes.len() + 1)));
        store.insert("head.box.w", normal_matrix(&mut rng, two_d, 4, 0.01));
        store.insert("head.box.b", Array2::zeros((1, 4)));

        store.insert("meta.w", normal_matrix(&mut rng, two_d, classes.len(), 0.01));
        store.insert("meta.b", Array2::zeros((1, classes.len())));

        Ok(Model {
            config,
            classes,
            store,
        })
    }

    pub fn class_index(&self, class: ClassId) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| *c == class)
            .ok_or_else(|| FpdError::validation(format!("class {class} unknown to this model")))
    }

    pub fn background_index(&self) -> usize {
        self.classes.len()
    }

    /// Append novel classes to every class-indexed parameter. `queries`
    /// carries transfer-initialized feature queries for FFA models; class
    /// embeddings start at zero and head/meta columns are freshly
    /// initialized.
    pub fn expand_classes(
        &mut self,
        additions: &[(ClassId, Option<Array2<f64>>)],
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        for (c, q) in additions {
            if self.classes.contains(c) {
                return Err(FpdError::validation(format!("class {c} already present")));
            }
            if self.config.variant.uses_ffa() {
                let q = q.as_ref().ok_or_else(|| {
                    FpdError::validation(format!("class {c} needs transfer-initialized queries"))
                })?;
                if q.dim() != (self.config.n_queries, self.config.d_prime) {
                    return Err(FpdError::shape(
                        "expand_classes",
                        "novel queries",
                        &[q.nrows(), q.ncols()],
                        "expected (n, d')",
                        &[self.config.n_queries, self.config.d_prime],
                    ));
                }
                self.store.insert(&format!("ffa.query.{c}"), q.clone());
                self.store
                    .insert(&format!("ffa.e_cls.{c}"), Array2::zeros((1, self.config.d)));
            }
        }

        let two_d = 2 * self.config.d;
        let old_c = self.classes.len();
        let new_c = old_c + additions.len();

        let old_cls_w = self.store.remove("head.cls.w").expect("head.cls.w");
        let old_cls_b = self.store.remove("head.cls.b").expect("head.cls.b");
        let mut cls_w = Array2::<f64>::zeros((two_d, new_c + 1));
        let mut cls_b = Array2::<f64>::zeros((1, new_c + 1));
        for j in 0..old_c {
            cls_w.column_mut(j).assign(&old_cls_w.column(j));
            cls_b[[0, j]] = old_cls_b[[0, j]];
        }
        for j in old_c..new_c {
            cls_w
                .column_mut(j)
                .assign(&normal_matrix(rng, two_d, 1, 0.01).column(0));
        }
        // background column stays last
        cls_w.column_mut(new_c).assign(&old_cls_w.column(old_c));
        cls_b[[0, new_c]] = old_cls_b[[0, old_c]];
        self.store.insert("head.cls.w", cls_w);
        self.store.insert("head.cls.b", cls_b);

        let old_meta_w = self.store.remove("meta.w").expect("meta.w");
        let old_meta_b = self.store.remove("meta.b").expect("meta.b");
        let mut meta_w = Array2::<f64>::zeros((two_d, new_c));
        let mut meta_b = Array2::<f64>::zeros((1, new_c));
        for j in 0..old_c {
            meta_w.column_mut(j).assign(&old_meta_w.column(j));
            meta_b[[0, j]] = old_meta_b[[0, j]];
        }
        for j in old_c..new_c {
            meta_w
                .column_mut(j)
                .assign(&normal_matrix(rng, two_d, 1, 0.01).column(0));
        }
        self.store.insert("meta.w", meta_w);
        self.store.insert("meta.b", meta_b);

        for (c, _) in additions {
            self.classes.push(*c);
        }
        Ok(())
    }

    /// View of the mid-level aggregation parameters as the value-level
    /// projection bundle.
    pub fn projection_params(&self) -> Result<ProjectionParams> {
        if !self.config.variant.uses_ffa() && !self.config.variant.uses_dense() {
            return Err(FpdError::validation(
                "variant has no mid-level aggregation parameters",
            ));
        }
        let prefix = if self.config.variant.uses_ffa() { "ffa" } else { "dense" };
        let mut class_embeddings = BTreeMap::new();
        let mut background = Array2::zeros((self.config.n_bg, self.config.d));
        if self.config.variant.uses_ffa() {
            for c in &self.classes {
                class_embeddings.insert(*c, self.store.get(&format!("ffa.e_cls.{c}")).clone());
            }
            background = self.store.get("ffa.bg").clone();
        }
        Ok(ProjectionParams {
            w: self.store.get(&format!("{prefix}.w")).clone(),
            w_prime: self.store.get(&format!("{prefix}.w_prime")).clone(),
            class_embeddings,
            alpha: self.store.get(&format!("{prefix}.alpha"))[[0, 0]],
            background_queries: background,
        })
    }

    /// Stacked feature queries of the given classes with per-row class ids.
    pub fn stacked_queries(&self, classes: &[ClassId]) -> Result<(Array2<f64>, Vec<ClassId>)> {
        if !self.config.variant.uses_ffa() {
            return Err(FpdError::validation("variant has no feature queries"));
        }
        let n = self.config.n_queries;
        let mut stacked = Array2::<f64>::zeros((n * classes.len(), self.config.d_prime));
        let mut labels = Vec::with_capacity(n * classes.len());
        for (i, c) in classes.iter().enumerate() {
            let q = self.store.get(&format!("ffa.query.{c}"));
            stacked
                .slice_mut(ndarray::s![i * n..(i + 1) * n, ..])
                .assign(q);
            for _ in 0..n {
                labels.push(*c);
            }
        }
        Ok((stacked, labels))
    }

    /// Mid-level features of an image as plain values (no gradient path).
    pub fn mid_feature_values(&self, image: &ImageTensor) -> Result<FeatureMap> {
        let mut g = Graph::new();
        let node = g.constant(image.matrix().clone());
        let frozen = FreezePolicy::none();
        let mid = extract_mid(
            &mut g,
            &self.config.backbone,
            node,
            image.height(),
            image.width(),
            image.channels(),
            &self.store,
            &frozen,
        );
        FeatureMap::new(mid.h, mid.w, g.value(mid.id).clone())
    }

    fn sampling_scheme(&self) -> SamplingScheme {
        if self.config.variant.uses_bcas() {
            SamplingScheme::Balanced
        } else {
            SamplingScheme::ClassSpecific
        }
    }

    fn sample_pairs(
        &self,
        scheme: SamplingScheme,
        assignments: &[RoiAssignment],
        roster: &[ClassId],
        rng: &mut impl Rng,
    ) -> Result<Vec<SamplePair>> {
        match scheme {
            SamplingScheme::Balanced => bcas_sample(assignments, roster, rng),
            SamplingScheme::ClassSpecific => class_specific_sample(assignments, roster, rng),
            SamplingScheme::ClassAgnostic => class_agnostic_sample(assignments, roster, rng),
        }
    }

    fn nlf_nodes(&self, g: &mut Graph, frozen: &FreezePolicy) -> NlfNodes {
        NlfNodes {
            f1_w: self.store.leaf(g, "nlf.f1.w", frozen),
            f1_b: self.store.leaf(g, "nlf.f1.b", frozen),
            f2_w: self.store.leaf(g, "nlf.f2.w", frozen),
            f2_b: self.store.leaf(g, "nlf.f2.b", frozen),
            f3_w: self.store.leaf(g, "nlf.f3.w", frozen),
            f3_b: self.store.leaf(g, "nlf.f3.b", frozen),
            agg_w: self.store.leaf(g, "nlf.agg.w", frozen),
            agg_b: self.store.leaf(g, "nlf.agg.b", frozen),
        }
    }

    fn fuse(
        &self,
        g: &mut Graph,
        roi_rows: NodeId,
        proto_rows: NodeId,
        nlf: &Option<NlfNodes>,
    ) -> NodeId {
        match nlf {
            Some(nodes) => nlf_fuse(g, roi_rows, proto_rows, nodes),
            None => elementwise_fuse(g, roi_rows, proto_rows),
        }
    }

    fn head_forward(
        &self,
        g: &mut Graph,
        fused: NodeId,
        frozen: &FreezePolicy,
    ) -> (NodeId, NodeId) {
        let fw = self.store.leaf(g, "head.fc.w", frozen);
        let fb = self.store.leaf(g, "head.fc.b", frozen);
        let fc = affine(g, fused, fw, fb);
        let fc = g.relu(fc);
        let cw = self.store.leaf(g, "head.cls.w", frozen);
        let cb = self.store.leaf(g, "head.cls.b", frozen);
        let cls = affine(g, fc, cw, cb);
        let bw = self.store.leaf(g, "head.box.w", frozen);
        let bb = self.store.leaf(g, "head.box.b", frozen);
        let boxes = affine(g, fc, bw, bb);
        (cls, boxes)
    }

    /// Episode forward in training mode: builds the loss graph.
    pub fn forward_train(
        &self,
        episode: &Episode,
        rng: &mut ChaCha8Rng,
        frozen: &FreezePolicy,
    ) -> Result<TrainForward> {
        let k = episode.validate()?;
        let roster = episode.class_roster.clone();
        for c in &roster {
            self.class_index(*c)?;
        }

        let mut g = Graph::new();
        let cfg = &self.config;
        let bb_cfg = &cfg.backbone;

        // one sampled shot per roster class
        let shot_indices: Vec<usize> = roster.iter().map(|_| rng.gen_range(0..k)).collect();

        // support branch: mid features per roster class
        let mut support_mids: Vec<SpatialNode> = Vec::with_capacity(roster.len());
        for (c, &shot) in roster.iter().zip(&shot_indices) {
            let crop = &episode.support_crops[c][shot];
            let node = g.constant(crop.image.matrix().clone());
            let mid = extract_mid(
                &mut g,
                bb_cfg,
                node,
                crop.image.height(),
                crop.image.width(),
                crop.image.channels(),
                &self.store,
                frozen,
            );
            support_mids.push(mid);
        }

        // mid-level aggregation state shared across query images
        let agg = if cfg.variant.uses_ffa() {
            let w = self.store.leaf(&mut g, "ffa.w", frozen);
            let mut protos: Vec<NodeId> = Vec::with_capacity(roster.len() + 1);
            for (c, mid) in roster.iter().zip(&support_mids) {
                let q = self.store.leaf(&mut g, &format!("ffa.query.{c}"), frozen);
                let e = self.store.leaf(&mut g, &format!("ffa.e_cls.{c}"), frozen);
                let (_aff, p) = ffa::distill(&mut g, mid.id, q, w, e);
                protos.push(p);
            }
            let bg = self.store.leaf(&mut g, "ffa.bg", frozen);
            protos.push(bg);
            let bank = g.concat_rows(&protos);
            MidAgg::Ffa {
                bank,
                w_prime: self.store.leaf(&mut g, "ffa.w_prime", frozen),
                alpha: self.store.leaf(&mut g, "ffa.alpha", frozen),
            }
        } else if cfg.variant.uses_dense() {
            let ids: Vec<NodeId> = support_mids.iter().map(|m| m.id).collect();
            let cells = g.concat_rows(&ids);
            MidAgg::Dense {
                cells,
                w: self.store.leaf(&mut g, "dense.w", frozen),
                w_prime: self.store.leaf(&mut g, "dense.w_prime", frozen),
                alpha: self.store.leaf(&mut g, "dense.alpha", frozen),
            }
        } else {
            MidAgg::None
        };

        // high-level class prototypes from the sampled shots
        let mut proto_rows: Vec<NodeId> = Vec::with_capacity(roster.len());
        for mid in &support_mids {
            let high = extract_high(&mut g, bb_cfg, *mid, &self.store, frozen);
            let pooled = g.mean_rows(high.id);
            proto_rows.push(pooled);
        }
        let proto_matrix = g.concat_rows(&proto_rows);

        // meta classification loss on class prototypes
        let mw = self.store.leaf(&mut g, "meta.w", frozen);
        let mb = self.store.leaf(&mut g, "meta.b", frozen);
        let meta_logits = affine(&mut g, proto_matrix, mw, mb);
        let roster_global: Vec<usize> = roster
            .iter()
            .map(|c| self.class_index(*c))
            .collect::<Result<_>>()?;
        let meta = losses::meta_loss(&mut g, meta_logits, &roster_global);

        let nlf = if cfg.variant.uses_nlf() {
            Some(self.nlf_nodes(&mut g, frozen))
        } else {
            None
        };
        let scheme = self.sampling_scheme();

        let mut per_image: Vec<ImageLossNodes> = Vec::with_capacity(episode.query_images.len());
        for q in &episode.query_images {
            per_image.push(self.query_image_losses(
                &mut g,
                q,
                &roster,
                &agg_ref(&agg),
                proto_matrix,
                &nlf,
                scheme,
                rng,
                frozen,
            )?);
        }

        let (total, report) = total_loss(&mut g, &per_image, Some(meta), &cfg.loss_weights);
        if !report.total.is_finite() {
            return Err(FpdError::Numerical(format!(
                "non-finite loss {:?}",
                report.values
            )));
        }
        Ok(TrainForward {
            graph: g,
            total,
            report,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn query_image_losses(
        &self,
        g: &mut Graph,
        q: &QuerySample,
        roster: &[ClassId],
        agg: &MidAggRef<'_>,
        proto_matrix: NodeId,
        nlf: &Option<NlfNodes>,
        scheme: SamplingScheme,
        rng: &mut ChaCha8Rng,
        frozen: &FreezePolicy,
    ) -> Result<ImageLossNodes> {
        let cfg = &self.config;
        let bb_cfg = &cfg.backbone;
        let img_size = (q.image.height(), q.image.width());

        let node = g.constant(q.image.matrix().clone());
        let mid = extract_mid(
            g,
            bb_cfg,
            node,
            q.image.height(),
            q.image.width(),
            q.image.channels(),
            &self.store,
            frozen,
        );

        let aggregated = match agg {
            MidAggRef::None => mid,
            MidAggRef::Ffa { bank, w_prime, alpha } => {
                let (_aff, out) = ffa::assign(g, mid.id, **bank, **w_prime, **alpha);
                SpatialNode { id: out, ..mid }
            }
            MidAggRef::Dense { cells, w, w_prime, alpha } => {
                let (_aff, out) = ffa::dense_match(g, mid.id, **cells, **w, **w_prime, **alpha);
                SpatialNode { id: out, ..mid }
            }
        };

        // RPN on the aggregated map
        let (obj, deltas) = rpn_forward(g, aggregated, &self.store, frozen);
        let anchors = anchor_grid(aggregated.h, aggregated.w, bb_cfg.mid_stride(), &cfg.rpn);
        let truth_boxes: Vec<BoundingBox> = q.truths.iter().map(|t| t.bbox).collect();
        let rpn_targets = assign_rpn_targets(
            &anchors,
            &truth_boxes,
            cfg.rpn.anchors_per_cell(),
            &cfg.rpn,
            rng,
        );
        let (rpn_obj, rpn_box) =
            losses::rpn_losses(g, obj, deltas, &rpn_targets, cfg.rpn_smooth_l1_beta);

        // proposals from detached RPN output, ground truth appended
        let mut proposals = generate_proposals(
            g.value(obj),
            g.value(deltas),
            &anchors,
            cfg.rpn.anchors_per_cell(),
            img_size,
            &cfg.rpn,
            cfg.rpn.post_nms_train,
        );
        proposals.extend(truth_boxes.iter().copied());

        let rois = sample_rois(&proposals, &q.truths, &cfg.roi, rng);
        if rois.is_empty() {
            return Ok(ImageLossNodes {
                rpn_obj,
                rpn_box,
                ..Default::default()
            });
        }

        // high-level features and pooled RoI vectors
        let high = extract_high(g, bb_cfg, aggregated, &self.store, frozen);
        let roi_boxes: Vec<BoundingBox> = rois.iter().map(|r| r.bbox).collect();
        let map_boxes = boxes_to_map_coords(&roi_boxes, bb_cfg.total_stride());
        let roi_feats = g.roi_pool(high.id, high.h, high.w, &map_boxes, cfg.roi.bins);

        // pair sampling and fusion
        let assignments: Vec<RoiAssignment> = rois.iter().map(|r| r.assignment).collect();
        let pairs = self.sample_pairs(scheme, &assignments, roster, rng)?;
        let roi_idx: Vec<usize> = pairs.iter().map(|p| p.roi_index).collect();
        let proto_idx: Vec<usize> = pairs
            .iter()
            .map(|p| roster.iter().position(|c| *c == p.prototype_label).unwrap())
            .collect();
        let roi_rows = g.gather_rows(roi_feats, &roi_idx);
        let proto_rows = g.gather_rows(proto_matrix, &proto_idx);
        let fused = self.fuse(g, roi_rows, proto_rows, nlf);
        let (cls_logits, box_out) = self.head_forward(g, fused, frozen);

        let pair_class_index: Vec<usize> = pairs
            .iter()
            .map(|p| match p.target {
                crate::fusion::PairTarget::Class(c) => self.class_index(c),
                crate::fusion::PairTarget::Background => Ok(self.background_index()),
            })
            .collect::<Result<_>>()?;
        let pair_deltas: Vec<Option<[f64; 4]>> = pairs
            .iter()
            .map(|p| rois[p.roi_index].deltas)
            .collect();
        let (roi_cls, roi_box) = losses::roi_losses(
            g,
            cls_logits,
            box_out,
            &pairs,
            &pair_class_index,
            self.background_index(),
            &pair_deltas,
            cfg.roi_smooth_l1_beta,
        );

        Ok(ImageLossNodes {
            rpn_obj,
            rpn_box,
            roi_cls,
            roi_box,
        })
    }

    /// Precompute everything the test-time pipeline needs from the support
    /// set: the fine-grained bank (shots integrated by compatibility
    /// weights), dense support cells, and high-level class prototypes.
    pub fn prepare_test_context(&self, episode: &Episode) -> Result<TestContext> {
        let k = episode.validate()?;
        let roster = episode.class_roster.clone();
        for c in &roster {
            self.class_index(*c)?;
        }

        // mid features per class per shot
        let mut mids: BTreeMap<ClassId, Vec<FeatureMap>> = BTreeMap::new();
        for c in &roster {
            let mut per_shot = Vec::with_capacity(k);
            for crop in &episode.support_crops[c] {
                per_shot.push(self.mid_feature_values(&crop.image)?);
            }
            mids.insert(*c, per_shot);
        }

        let bank = if self.config.variant.uses_ffa() {
            let params = self.projection_params()?;
            let mut per_class: Vec<PrototypeSet> = Vec::with_capacity(roster.len());
            for c in &roster {
                let queries = crate::types::FeatureQuerySet {
                    class_id: *c,
                    queries: self.store.get(&format!("ffa.query.{c}")).clone(),
                };
                let shots = &mids[c];
                let mut per_shot: Vec<PrototypeSet> = Vec::with_capacity(k);
                let mut weights = Array2::<f64>::zeros((self.config.n_queries, k));
                for (s, x_s) in shots.iter().enumerate() {
                    let (_aff, p) = ffa::distill_prototypes(x_s, &queries, &params)?;
                    per_shot.push(p);
                    let hw = x_s.positions();
                    let kk = transfer::default_topk(hw);
                    let scores = transfer::compatibility_scores(&queries.queries, x_s, &params)?;
                    let (w, _) = transfer::topk_row_weights(&scores, kk);
                    for i in 0..self.config.n_queries {
                        weights[[i, s]] = w[i];
                    }
                }
                per_class.push(transfer::integrate_shots(
                    &per_shot,
                    &weights,
                    self.config.shot_weight_mode,
                )?);
            }
            Some(ffa::build_prototype_bank(&per_class, &self.projection_params()?)?)
        } else {
            None
        };

        let dense_cells = if self.config.variant.uses_dense() {
            // all shots of all classes as raw cells
            let total: usize = roster.iter().map(|c| mids[c].iter().map(|m| m.positions()).sum::<usize>()).sum();
            let d = self.config.d;
            let mut cells = Array2::<f64>::zeros((total, d));
            let mut off = 0;
            for c in &roster {
                for m in &mids[c] {
                    cells
                        .slice_mut(ndarray::s![off..off + m.positions(), ..])
                        .assign(m.matrix());
                    off += m.positions();
                }
            }
            Some(cells)
        } else {
            None
        };

        // high-level prototypes: mean over shots of pooled stage-four features
        let mut class_prototypes: Vec<(ClassId, Vec<f64>)> = Vec::with_capacity(roster.len());
        for c in &roster {
            let mut acc = vec![0.0f64; 2 * self.config.d];
            for m in &mids[c] {
                let pooled = self.high_pooled_values(m)?;
                for (a, v) in acc.iter_mut().zip(pooled.iter()) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a /= k as f64;
            }
            class_prototypes.push((*c, acc));
        }

        Ok(TestContext {
            roster,
            bank,
            dense_cells,
            class_prototypes,
        })
    }

    fn high_pooled_values(&self, mid: &FeatureMap) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let node = g.constant(mid.matrix().clone());
        let frozen = FreezePolicy::none();
        let sn = SpatialNode {
            id: node,
            h: mid.height(),
            w: mid.width(),
            c: mid.channels(),
        };
        let high = extract_high(&mut g, &self.config.backbone, sn, &self.store, &frozen);
        let pooled = g.mean_rows(high.id);
        Ok(g.value(pooled).row(0).to_vec())
    }

    /// Detect objects in one image given a prepared support context.
    pub fn forward_test_image(
        &self,
        image: &ImageTensor,
        ctx: &TestContext,
    ) -> Result<Vec<Detection>> {
        let cfg = &self.config;
        let bb_cfg = &cfg.backbone;
        let img_size = (image.height(), image.width());
        let frozen = FreezePolicy::none();

        let mut g = Graph::new();
        let node = g.constant(image.matrix().clone());
        let mid = extract_mid(
            &mut g,
            bb_cfg,
            node,
            image.height(),
            image.width(),
            image.channels(),
            &self.store,
            &frozen,
        );

        let aggregated = if let Some(bank) = &ctx.bank {
            let bk = g.constant(bank.rows.clone());
            let wp = self.store.leaf(&mut g, "ffa.w_prime", &frozen);
            let al = self.store.leaf(&mut g, "ffa.alpha", &frozen);
            let (_aff, out) = ffa::assign(&mut g, mid.id, bk, wp, al);
            SpatialNode { id: out, ..mid }
        } else if let Some(cells) = &ctx.dense_cells {
            let cl = g.constant(cells.clone());
            let w = self.store.leaf(&mut g, "dense.w", &frozen);
            let wp = self.store.leaf(&mut g, "dense.w_prime", &frozen);
            let al = self.store.leaf(&mut g, "dense.alpha", &frozen);
            let (_aff, out) = ffa::dense_match(&mut g, mid.id, cl, w, wp, al);
            SpatialNode { id: out, ..mid }
        } else {
            mid
        };

        let (obj, deltas) = rpn_forward(&mut g, aggregated, &self.store, &frozen);
        let anchors = anchor_grid(aggregated.h, aggregated.w, bb_cfg.mid_stride(), &cfg.rpn);
        let proposals = generate_proposals(
            g.value(obj),
            g.value(deltas),
            &anchors,
            cfg.rpn.anchors_per_cell(),
            img_size,
            &cfg.rpn,
            cfg.rpn.post_nms_test,
        );
        if proposals.is_empty() {
            return Ok(vec![]);
        }

        let high = extract_high(&mut g, bb_cfg, aggregated, &self.store, &frozen);
        let map_boxes = boxes_to_map_coords(&proposals, bb_cfg.total_stride());
        let roi_feats = g.roi_pool(high.id, high.h, high.w, &map_boxes, cfg.roi.bins);
        let n_rois = proposals.len();

        let nlf = if cfg.variant.uses_nlf() {
            Some(self.nlf_nodes(&mut g, &frozen))
        } else {
            None
        };

        // pair every proposal with every roster class prototype
        let mut scores = Array2::<f64>::zeros((n_rois, ctx.roster.len()));
        let mut deltas_per_class: Vec<Array2<f64>> = Vec::with_capacity(ctx.roster.len());
        for (c_idx, (class, proto)) in ctx.class_prototypes.iter().enumerate() {
            let proto_node = g.constant(row(proto));
            let proto_rows = g.gather_rows(proto_node, &vec![0usize; n_rois]);
            let fused = self.fuse(&mut g, roi_feats, proto_rows, &nlf);
            let (cls_logits, box_out) = self.head_forward(&mut g, fused, &frozen);
            let probs = g.softmax_rows(cls_logits);
            let global = self.class_index(*class)?;
            for r in 0..n_rois {
                scores[[r, c_idx]] = g.value(probs)[[r, global]];
            }
            deltas_per_class.push(g.value(box_out).clone());
        }

        Ok(decode_detections(
            &proposals,
            &ctx.roster,
            &scores,
            &deltas_per_class,
            img_size,
            &cfg.roi,
        ))
    }

    /// Full test-mode episode forward: per query image detections.
    pub fn forward_test(&self, episode: &Episode) -> Result<Vec<Vec<Detection>>> {
        let ctx = self.prepare_test_context(episode)?;
        episode
            .query_images
            .iter()
            .map(|q| self.forward_test_image(&q.image, &ctx))
            .collect()
    }
}

/// Borrow-friendly view of the aggregation state used per query image.
enum MidAggRef<'a> {
    None,
    Ffa {
        bank: &'a NodeId,
        w_prime: &'a NodeId,
        alpha: &'a NodeId,
    },
    Dense {
        cells: &'a NodeId,
        w: &'a NodeId,
        w_prime: &'a NodeId,
        alpha: &'a NodeId,
    },
}

enum MidAgg {
    None,
    Ffa { bank: NodeId, w_prime: NodeId, alpha: NodeId },
    Dense { cells: NodeId, w: NodeId, w_prime: NodeId, alpha: NodeId },
}

fn agg_ref(agg: &MidAgg) -> MidAggRef<'_> {
    match agg {
        MidAgg::None => MidAggRef::None,
        MidAgg::Ffa { bank, w_prime, alpha } => MidAggRef::Ffa { bank, w_prime, alpha },
        MidAgg::Dense { cells, w, w_prime, alpha } => MidAggRef::Dense { cells, w, w_prime, alpha },
    }
}

/// The output of a training forward pass.
pub struct TrainForward {
    pub graph: Graph,
    pub total: NodeId,
    pub report: LossReport,
}

/// Support-derived state reused across test images.
#[derive(Clone, Debug)]
pub struct TestContext {
    pub roster: Vec<ClassId>,
    pub bank: Option<PrototypeBank>,
    pub dense_cells: Option<Array2<f64>>,
    /// (class, pooled 2d vector) in roster order.
    pub class_prototypes: Vec<(ClassId, Vec<f64>)>,
}
