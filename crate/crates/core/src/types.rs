//! Shared domain types for the two-branch few-shot detector.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{FpdError, Result};

/// Stable class identifier from the dataset class table.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct ClassId(pub u32);

impl std::fmt::Display for ClassId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "c{:03}", self.0)
    }
}

/// A spatial feature grid stored as its row-major `(H*W, C)` flattening, so
/// it can be used directly as a matrix of position vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    values: Array2<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, values: Array2<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.ncols() == 0 {
            return Err(FpdError::validation("feature map dims must be positive"));
        }
        if values.nrows() != height * width {
            return Err(FpdError::validation(format!(
                "feature map rows {} != height*width {}",
                values.nrows(),
                height * width
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FpdError::validation("feature map contains non-finite values"));
        }
        Ok(FeatureMap {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    /// The `(H*W, C)` matrix view.
    pub fn matrix(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.values
    }

    /// Rebuild from an unflattened `[H][W][C]` nest; inverse of `unflatten`.
    pub fn flatten(height: usize, width: usize, grid: &[Vec<Vec<f64>>]) -> Result<Self> {
        let channels = grid
            .first()
            .and_then(|r| r.first())
            .map(|c| c.len())
            .unwrap_or(0);
        let mut values = Array2::<f64>::zeros((height * width, channels));
        for (y, row) in grid.iter().enumerate() {
            for (x, cell) in row.iter().enumerate() {
                for (ch, v) in cell.iter().enumerate() {
                    values[[y * width + x, ch]] = *v;
                }
            }
        }
        FeatureMap::new(height, width, values)
    }

    /// Expand back to `[H][W][C]`.
    pub fn unflatten(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.height)
            .map(|y| {
                (0..self.width)
                    .map(|x| self.values.row(y * self.width + x).to_vec())
                    .collect()
            })
            .collect()
    }
}

/// Per-class learnable embeddings that guide prototype distillation. Each
/// class owns its rows exclusively; duplication always copies.
#[derive(Clone, Debug)]
pub struct FeatureQuerySet {
    pub class_id: ClassId,
    /// (n, d') matrix.
    pub queries: Array2<f64>,
}

impl FeatureQuerySet {
    pub fn n(&self) -> usize {
        self.queries.nrows()
    }

    pub fn d_prime(&self) -> usize {
        self.queries.ncols()
    }
}

/// Projection weights and related learnables used by the mid-level
/// aggregation path.
#[derive(Clone, Debug)]
pub struct ProjectionParams {
    /// (d, d') support-side projection.
    pub w: Array2<f64>,
    /// (d, d') projection shared by the query map and the prototype bank.
    pub w_prime: Array2<f64>,
    /// Per-class (1, d) embeddings added to distilled prototypes.
    pub class_embeddings: BTreeMap<ClassId, Array2<f64>>,
    /// Residual gate; starts at exactly zero.
    pub alpha: f64,
    /// (n_bg, d) free embeddings acting as background prototypes.
    pub background_queries: Array2<f64>,
}

impl ProjectionParams {
    pub fn d(&self) -> usize {
        self.w.nrows()
    }

    pub fn d_prime(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_bg(&self) -> usize {
        self.background_queries.nrows()
    }
}

/// Fine-grained prototypes of one class, living in the same d-dimensional
/// space as the support features they were pooled from.
#[derive(Clone, Debug)]
pub struct PrototypeSet {
    pub class_id: ClassId,
    /// (n, d) matrix.
    pub prototypes: Array2<f64>,
}

/// Row provenance inside a [`PrototypeBank`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowLabel {
    Class(ClassId),
    Background,
}

/// Stacked prototypes of all episode classes plus the background rows.
#[derive(Clone, Debug)]
pub struct PrototypeBank {
    pub rows: Array2<f64>,
    pub row_labels: Vec<RowLabel>,
}

impl PrototypeBank {
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn d(&self) -> usize {
        self.rows.ncols()
    }
}

/// Axis-aligned box in image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x2 > x1 && y2 > y1) {
            return Err(FpdError::validation(format!(
                "degenerate box ({x1},{y1},{x2},{y2})"
            )));
        }
        Ok(BoundingBox { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix1 = self.x1.max(other.x1);
        let iy1 = self.y1.max(other.y1);
        let ix2 = self.x2.min(other.x2);
        let iy2 = self.y2.min(other.y2);
        let iw = (ix2 - ix1).max(0.0);
        let ih = (iy2 - iy1).max(0.0);
        let inter = iw * ih;
        if inter <= 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }
}

/// One annotated object.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub bbox: BoundingBox,
    pub class_id: ClassId,
}

/// A raw image carried as an (H*W, 3) matrix of [0,1] reals.
pub type ImageTensor = FeatureMap;

/// One query image with its annotations.
#[derive(Clone, Debug)]
pub struct QuerySample {
    pub image: ImageTensor,
    pub truths: Vec<GroundTruth>,
    /// Manifest image id, for leakage audits.
    pub image_id: u32,
}

/// One support crop with the id of the image it was cut from.
#[derive(Clone, Debug)]
pub struct SupportCrop {
    pub image: ImageTensor,
    pub source_image_id: u32,
}

/// One training/evaluation unit: query images plus K support crops per
/// roster class.
#[derive(Clone, Debug)]
pub struct Episode {
    pub query_images: Vec<QuerySample>,
    pub support_crops: BTreeMap<ClassId, Vec<SupportCrop>>,
    pub class_roster: Vec<ClassId>,
}

impl Episode {
    /// Check the structural invariants: full roster coverage with a uniform
    /// shot count, and no query label outside the roster.
    pub fn validate(&self) -> Result<usize> {
        let mut k: Option<usize> = None;
        for class in &self.class_roster {
            let crops = self
                .support_crops
                .get(class)
                .ok_or_else(|| FpdError::validation(format!("class {class} has no support crops")))?;
            match k {
                None => k = Some(crops.len()),
                Some(prev) if prev != crops.len() => {
                    return Err(FpdError::validation(format!(
                        "class {class} has {} crops, expected {prev}",
                        crops.len()
                    )))
                }
                _ => {}
            }
        }
        for q in &self.query_images {
            for t in &q.truths {
                if !self.class_roster.contains(&t.class_id) {
                    return Err(FpdError::validation(format!(
                        "query label {} not in episode roster",
                        t.class_id
                    )));
                }
            }
        }
        k.ok_or_else(|| FpdError::validation("episode has an empty class roster"))
    }
}

/// Pooled high-level feature of one proposal; length 2d.
#[derive(Clone, Debug)]
pub struct RoIFeature {
    pub vector: Vec<f64>,
    pub source_box: BoundingBox,
}

/// High-level class prototype; length 2d.
#[derive(Clone, Debug)]
pub struct ClassPrototype {
    pub vector: Vec<f64>,
    pub label: ClassId,
}

/// One scored detection in image coordinates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_id: ClassId,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, class_id: ClassId, score: f64) -> Result<Self> {
        if !score.is_finite() {
            return Err(FpdError::validation("detection score must be finite"));
        }
        Ok(Detection {
            bbox,
            class_id,
            score,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn feature_map_rejects_bad_row_count() {
        let err = FeatureMap::new(2, 2, array![[1.0], [2.0], [3.0]]);
        assert!(err.is_err());
    }

    #[test]
    fn feature_map_rejects_non_finite() {
        let err = FeatureMap::new(1, 2, array![[1.0], [f64::NAN]]);
        assert!(err.is_err());
    }

    #[test]
    fn flatten_unflatten_roundtrip_is_bit_identical() {
        let vals = array![
            [0.125, -3.5],
            [2.0, 0.1],
            [7.25, -0.0625],
            [1e-17, 42.0],
            [-1.5, 0.3],
            [9.0, -2.25]
        ];
        let fm = FeatureMap::new(2, 3, vals.clone()).unwrap();
        let grid = fm.unflatten();
        let back = FeatureMap::flatten(2, 3, &grid).unwrap();
        assert_eq!(back.matrix(), &vals);
    }

    #[test]
    fn iou_of_identical_boxes_is_one() {
        let b = BoundingBox::new(1.0, 1.0, 5.0, 5.0).unwrap();
        assert!((b.iou(&b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_of_disjoint_boxes_is_zero() {
        let a = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let b = BoundingBox::new(2.0, 2.0, 3.0, 3.0).unwrap();
        assert_eq!(a.iou(&b), 0.0);
    }

    #[test]
    fn degenerate_box_is_rejected() {
        assert!(BoundingBox::new(3.0, 1.0, 3.0, 5.0).is_err());
    }

    #[test]
    fn episode_validation_catches_missing_class_and_uneven_k() {
        let img = FeatureMap::new(1, 1, array![[0.0, 0.0, 0.0]]).unwrap();
        let crop = SupportCrop {
            image: img.clone(),
            source_image_id: 9,
        };
        let mut ep = Episode {
            query_images: vec![],
            support_crops: BTreeMap::new(),
            class_roster: vec![ClassId(0), ClassId(1)],
        };
        assert!(ep.validate().is_err());
        ep.support_crops.insert(ClassId(0), vec![crop.clone(), crop.clone()]);
        ep.support_crops.insert(ClassId(1), vec![crop.clone()]);
        assert!(ep.validate().is_err());
        ep.support_crops.get_mut(&ClassId(1)).unwrap().push(crop);
        assert_eq!(ep.validate().unwrap(), 2);
    }
}
