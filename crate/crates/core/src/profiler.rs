//! Analytic cost model: parameter counts and multiply-accumulate counts
//! for the plain detector, the prototype-aggregation variant and the
//! dense-matching variant, at desk scale and at full reference scale.
//!
//! Full-scale numbers are symbolic (never executed). The desk parameter
//! counts come from actually instantiated models, so they track the code.

use serde::{Deserialize, Serialize};

use crate::detector::{Model, ModelConfig, Variant};
use crate::error::Result;
use crate::types::ClassId;

/// Dimensions entering the aggregation-cost formulas.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CostDims {
    /// Support classes.
    pub c: usize,
    /// Feature queries per class.
    pub n: usize,
    pub n_bg: usize,
    /// Mid-level channels.
    pub d: usize,
    pub d_prime: usize,
    /// Support map positions (hw).
    pub hw_support: usize,
    /// Query map positions (HW).
    pub hw_query: usize,
    /// Shots whose support cells dense matching attends over.
    pub k: usize,
}

impl CostDims {
    pub fn bank_rows(&self) -> usize {
        self.n * self.c + self.n_bg
    }

    pub fn dense_cells(&self) -> usize {
        self.c * self.hw_support * self.k
    }
}

/// Per-image MACs of assigning bank prototypes into the query map.
pub fn ffa_assign_macs(dims: &CostDims) -> f64 {
    let rows = dims.bank_rows() as f64;
    let (hw, d, dp) = (dims.hw_query as f64, dims.d as f64, dims.d_prime as f64);
    hw * d * dp + rows * d * dp + hw * rows * dp + hw * rows * d
}

/// One-time MACs of distilling prototypes from a support set.
pub fn ffa_distill_macs(dims: &CostDims) -> f64 {
    let (c, n, hw, d, dp) = (
        dims.c as f64,
        dims.n as f64,
        dims.hw_support as f64,
        dims.d as f64,
        dims.d_prime as f64,
    );
    c * dims.k as f64 * (hw * d * dp + n * hw * dp + n * hw * d)
}

/// Per-image MACs of dense matching straight onto support cells.
pub fn dense_match_macs(dims: &CostDims) -> f64 {
    let cells = dims.dense_cells() as f64;
    let (hw, d, dp) = (dims.hw_query as f64, dims.d as f64, dims.d_prime as f64);
    hw * d * dp + cells * d * dp + hw * cells * dp + hw * cells * d
}

/// Extra parameters of the fine-grained aggregation path.
pub fn ffa_extra_params(dims: &CostDims) -> f64 {
    let (c, n, nbg, d, dp) = (
        dims.c as f64,
        dims.n as f64,
        dims.n_bg as f64,
        dims.d as f64,
        dims.d_prime as f64,
    );
    c * n * dp + 2.0 * d * dp + 1.0 + c * d + nbg * d
}

/// Extra parameters of a dense relation block at full scale: paired key
/// embeddings at half width plus value and output projections, as in
/// non-local attention blocks.
pub fn dense_extra_params_full(dims: &CostDims) -> f64 {
    let d = dims.d as f64;
    2.0 * d * (d / 2.0) + 2.0 * d * d
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CostLine {
    pub variant: String,
    pub params: f64,
    /// Per-image inference MACs.
    pub macs_per_image: f64,
    /// One-time support preprocessing MACs (prototype distillation).
    pub support_macs: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CostReport {
    pub preset: String,
    pub lines: Vec<CostLine>,
    /// Published reference measurements for the full-scale preset, if any:
    /// (variant, params MB, GFLOPs).
    pub reference: Option<Vec<(String, f64, f64)>>,
}

impl CostReport {
    pub fn line(&self, variant: &str) -> &CostLine {
        self.lines
            .iter()
            .find(|l| l.variant == variant)
            .expect("variant missing from report")
    }
}

/// Per-image MACs of the shared trunk at desk scale (backbone, RPN and one
/// pass of the head over the post-NMS proposals).
fn desk_trunk_macs(cfg: &ModelConfig, num_classes: usize) -> f64 {
    let bb = &cfg.backbone;
    let (mut h, mut w) = bb.input_size;
    let mut cin = 3usize;
    let mut macs = 0.0;
    let mut mid_dims = (0usize, 0usize);
    for (i, s) in bb.mid_stages.iter().enumerate() {
        let ho = crate::autodiff::conv_out(h, 3, s.stride, 1);
        let wo = crate::autodiff::conv_out(w, 3, s.stride, 1);
        macs += (ho * wo * s.out_channels * 9 * cin) as f64;
        h = ho;
        w = wo;
        cin = s.out_channels;
        if i == bb.mid_stages.len() - 1 {
            mid_dims = (h, w);
        }
    }
    for s in &bb.high_stages {
        let ho = crate::autodiff::conv_out(h, 3, s.stride, 1);
        let wo = crate::autodiff::conv_out(w, 3, s.stride, 1);
        macs += (ho * wo * s.out_channels * 9 * cin) as f64;
        h = ho;
        w = wo;
        cin = s.out_channels;
    }
    // rpn trunk + heads on the mid map
    let (mid_h, mid_w) = mid_dims;
    let a = cfg.rpn.anchors_per_cell();
    macs += (mid_h * mid_w * cfg.d * 9 * cfg.d) as f64;
    macs += (mid_h * mid_w * cfg.d * (a + 4 * a)) as f64;
    // detection head over proposals paired with every class
    let two_d = 2 * cfg.d;
    let pairs = cfg.rpn.post_nms_test * num_classes;
    let head = two_d * two_d + two_d * (num_classes + 1) + two_d * 4;
    macs += (pairs * head) as f64;
    macs
}

/// MACs of the non-linear fusion head per image at desk scale.
fn desk_nlf_macs(cfg: &ModelConfig, num_classes: usize) -> f64 {
    let two_d = 2 * cfg.d;
    let pairs = cfg.rpn.post_nms_test * num_classes;
    let per_pair = two_d * two_d * 2 + (2 * two_d) * two_d + (4 * two_d) * two_d;
    (pairs * per_pair) as f64
}

fn desk_dims(cfg: &ModelConfig, num_classes: usize, k: usize) -> CostDims {
    let bb = &cfg.backbone;
    let (mh, mw) = bb.mid_dims(bb.input_size.0, bb.input_size.1);
    let (sh, sw) = bb.mid_dims(bb.support_size, bb.support_size);
    CostDims {
        c: num_classes,
        n: cfg.n_queries,
        n_bg: cfg.n_bg,
        d: cfg.d,
        d_prime: cfg.d_prime,
        hw_support: sh * sw,
        hw_query: mh * mw,
        k,
    }
}

/// Desk-scale report: parameter counts from real model instances, MACs from
/// the analytic model.
pub fn desk_report(cfg: &ModelConfig, classes: &[ClassId], k: usize) -> Result<CostReport> {
    let dims = desk_dims(cfg, classes.len(), k);
    let mut lines = Vec::new();
    for variant in [Variant::Baseline, Variant::Full, Variant::DenseMatch] {
        let mut vcfg = cfg.clone();
        vcfg.variant = variant;
        let model = Model::new(vcfg.clone(), classes.to_vec(), 0)?;
        let params = model.store.total_scalars() as f64;
        let trunk = desk_trunk_macs(&vcfg, classes.len());
        let (agg, support, fusion) = match variant {
            Variant::Full => (
                ffa_assign_macs(&dims),
                ffa_distill_macs(&dims),
                desk_nlf_macs(&vcfg, classes.len()),
            ),
            Variant::DenseMatch => (
                dense_match_macs(&dims),
                0.0,
                desk_nlf_macs(&vcfg, classes.len()),
            ),
            _ => (0.0, 0.0, 0.0),
        };
        lines.push(CostLine {
            variant: variant.name().to_string(),
            params,
            macs_per_image: trunk + agg + fusion,
            support_macs: support,
        });
    }
    Ok(CostReport {
        preset: "desk".to_string(),
        lines,
        reference: None,
    })
}

/// Published full-scale reference measurements (ResNet-101 trunk):
/// (variant, params in MB, GFLOPs per image).
pub const REFERENCE_VOC: [(&str, f64, f64); 3] = [
    ("baseline", 45.99, 709.76),
    ("full", 65.68, 818.10),
    ("dense-match", 69.58, 956.72),
];

pub const REFERENCE_COCO: [(&str, f64, f64); 3] = [
    ("baseline", 46.72, 766.36),
    ("full", 66.5, 1309.50),
    ("dense-match", 70.32, 1466.25),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FullScalePreset {
    /// 20 classes, 1333x800 inputs, stage-3 width 1024.
    Voc20,
    /// 80 classes, otherwise identical trunk assumptions.
    Coco80,
}

impl FullScalePreset {
    pub fn dims(&self) -> CostDims {
        let c = match self {
            FullScalePreset::Voc20 => 20,
            FullScalePreset::Coco80 => 80,
        };
        CostDims {
            c,
            n: 5,
            n_bg: 5,
            d: 1024,
            d_prime: 1024,
            // support crops 224x224 at stride 16
            hw_support: 14 * 14,
            // 1333x800 at stride 16
            hw_query: 84 * 50,
            k: 1,
        }
    }

    pub fn reference(&self) -> Vec<(String, f64, f64)> {
        let table = match self {
            FullScalePreset::Voc20 => REFERENCE_VOC,
            FullScalePreset::Coco80 => REFERENCE_COCO,
        };
        table
            .iter()
            .map(|(v, p, f)| (v.to_string(), *p, *f))
            .collect()
    }
}

/// Symbolic full-scale report. Trunk costs are held constant across
/// variants, so only the aggregation additions order the lines.
pub fn full_scale_report(preset: FullScalePreset) -> CostReport {
    let dims = preset.dims();
    // nominal deep-backbone trunk, identical across variants
    let trunk_params = 45.0e6;
    let trunk_macs = 700.0e9;
    let nlf_params = {
        let two_d = 2.0 * dims.d as f64;
        two_d * two_d * 2.0 + (2.0 * two_d) * two_d + (4.0 * two_d) * two_d
    };

    let lines = vec![
        CostLine {
            variant: "baseline".to_string(),
            params: trunk_params,
            macs_per_image: trunk_macs,
            support_macs: 0.0,
        },
        CostLine {
            variant: "full".to_string(),
            params: trunk_params + nlf_params + ffa_extra_params(&dims),
            macs_per_image: trunk_macs + ffa_assign_macs(&dims),
            support_macs: ffa_distill_macs(&dims),
        },
        CostLine {
            variant: "dense-match".to_string(),
            params: trunk_params + nlf_params + dense_extra_params_full(&dims),
            macs_per_image: trunk_macs + dense_match_macs(&dims),
            support_macs: 0.0,
        },
    ];
    CostReport {
        preset: match preset {
            FullScalePreset::Voc20 => "voc-full".to_string(),
            FullScalePreset::Coco80 => "coco-full".to_string(),
        },
        lines,
        reference: Some(preset.reference()),
    }
}

/// Render a report as aligned text lines for the CLI.
pub fn format_report(report: &CostReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("cost report ({})\n", report.preset));
    out.push_str("variant        params            macs/image        support-macs\n");
    for l in &report.lines {
        out.push_str(&format!(
            "{:<14} {:<17.4e} {:<17.4e} {:<17.4e}\n",
            l.variant, l.params, l.macs_per_image, l.support_macs
        ));
    }
    if let Some(reference) = &report.reference {
        out.push_str("reference measurements (params MB, GFLOPs):\n");
        for (v, p, f) in reference {
            out.push_str(&format!("{v:<14} {p:<8.2} {f:<8.2}\n"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dims() -> CostDims {
        CostDims {
            c: 6,
            n: 5,
            n_bg: 5,
            d: 16,
            d_prime: 16,
            hw_support: 64,
            hw_query: 256,
            k: 1,
        }
    }

    #[test]
    fn assignment_beats_dense_when_bank_is_smaller() {
        let dims = toy_dims();
        assert!(dims.bank_rows() < dims.dense_cells());
        assert!(ffa_assign_macs(&dims) < dense_match_macs(&dims));
    }

    #[test]
    fn ordering_flips_with_degenerate_support() {
        // single support cell per class makes dense matching cheaper
        let dims = CostDims {
            hw_support: 1,
            ..toy_dims()
        };
        assert!(dims.dense_cells() < dims.bank_rows());
        assert!(dense_match_macs(&dims) < ffa_assign_macs(&dims));
    }

    #[test]
    fn full_scale_orderings_match_reference_direction() {
        let report = full_scale_report(FullScalePreset::Voc20);
        let base = report.line("baseline");
        let full = report.line("full");
        let dense = report.line("dense-match");
        assert!(base.params < full.params && full.params < dense.params);
        assert!(base.macs_per_image < full.macs_per_image);
        assert!(full.macs_per_image < dense.macs_per_image);
        let r = report.reference.unwrap();
        assert!(r[0].1 < r[1].1 && r[1].1 < r[2].1);
        assert!(r[0].2 < r[1].2 && r[1].2 < r[2].2);
    }

    #[test]
    fn desk_params_baseline_below_full() {
        let cfg = ModelConfig::desk_default(16, Variant::Full);
        let classes: Vec<ClassId> = (0..6).map(ClassId).collect();
        let report = desk_report(&cfg, &classes, 1).unwrap();
        assert!(report.line("baseline").params < report.line("full").params);
    }
}
