//! Synthetic few-shot detection dataset: on-disk manifest format, glyph
//! renderer, K-shot split construction and the episode sampler.

pub mod render;
pub mod sampler;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FpdError, Result};
use crate::types::{BoundingBox, ClassId, FeatureMap, ImageTensor};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassRole {
    #[serde(rename = "BASE")]
    Base,
    #[serde(rename = "NOVEL")]
    Novel,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClassEntry {
    pub id: u32,
    pub name: String,
    pub role: ClassRole,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Annotation {
    /// (x1, y1, x2, y2) in image pixels.
    pub bbox: [f64; 4],
    pub class_id: u32,
}

impl Annotation {
    pub fn bounding_box(&self) -> Result<BoundingBox> {
        BoundingBox::new(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3])
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ImageRecord {
    pub id: u32,
    /// Path relative to the manifest directory.
    pub path: String,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<Annotation>,
}

/// Annotation-level reference for the K-shot split.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ShotRef {
    pub image_id: u32,
    pub ann_index: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Splits {
    /// Images available for training-side use.
    pub train_pool: Vec<u32>,
    /// Held-out evaluation images; never overlaps the train pool.
    pub test: Vec<u32>,
    /// Train-pool images free of novel-class objects (populated by the
    /// K-shot split step).
    pub base_train: Vec<u32>,
    /// Exactly K annotated objects per class, base and novel alike.
    pub finetune_shots: Vec<ShotRef>,
    /// The K of the fine-tune split; zero until the split is built.
    pub k: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    /// (height, width).
    pub image_size: [usize; 2],
    pub classes: Vec<ClassEntry>,
    pub images: Vec<ImageRecord>,
    pub splits: Splits,
}

impl DatasetManifest {
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| FpdError::Format(format!("manifest serialization: {e}")))?;
        fs::write(&path, body + "\n")?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path)?;
        let manifest: DatasetManifest = serde_json::from_str(&body)
            .map_err(|e| FpdError::Format(format!("manifest parse: {e}")))?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(FpdError::Format(format!(
                "manifest schema {} unsupported (expected {MANIFEST_SCHEMA_VERSION})",
                manifest.schema_version
            )));
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let ids: Vec<u32> = self.classes.iter().map(|c| c.id).collect();
        for (i, a) in ids.iter().enumerate() {
            if ids[i + 1..].contains(a) {
                return Err(FpdError::validation(format!("duplicate class id {a}")));
            }
        }
        for img in &self.images {
            for ann in &img.annotations {
                if !ids.contains(&ann.class_id) {
                    return Err(FpdError::validation(format!(
                        "image {} references unknown class {}",
                        img.id, ann.class_id
                    )));
                }
                let b = &ann.bbox;
                if b[0] < 0.0 || b[1] < 0.0 || b[2] > img.width as f64 || b[3] > img.height as f64 {
                    return Err(FpdError::validation(format!(
                        "image {} has an out-of-bounds annotation",
                        img.id
                    )));
                }
            }
        }
        for t in &self.splits.test {
            if self.splits.train_pool.contains(t) {
                return Err(FpdError::validation(format!(
                    "image {t} appears in both train pool and test split"
                )));
            }
        }
        if self.splits.k > 0 {
            let mut per_class: BTreeMap<u32, usize> = BTreeMap::new();
            for shot in &self.splits.finetune_shots {
                let img = self.image(shot.image_id)?;
                let ann = img.annotations.get(shot.ann_index).ok_or_else(|| {
                    FpdError::validation(format!(
                        "shot reference {}/{} out of range",
                        shot.image_id, shot.ann_index
                    ))
                })?;
                *per_class.entry(ann.class_id).or_insert(0) += 1;
            }
            for c in &self.classes {
                if per_class.get(&c.id).copied().unwrap_or(0) != self.splits.k {
                    return Err(FpdError::validation(format!(
                        "class {} has {} fine-tune shots, expected {}",
                        c.id,
                        per_class.get(&c.id).copied().unwrap_or(0),
                        self.splits.k
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn image(&self, id: u32) -> Result<&ImageRecord> {
        self.images
            .iter()
            .find(|i| i.id == id)
            .ok_or_else(|| FpdError::validation(format!("unknown image id {id}")))
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.classes.iter().map(|c| ClassId(c.id)).collect()
    }

    pub fn base_classes(&self) -> Vec<ClassId> {
        self.classes
            .iter()
            .filter(|c| c.role == ClassRole::Base)
            .map(|c| ClassId(c.id))
            .collect()
    }

    pub fn novel_classes(&self) -> Vec<ClassId> {
        self.classes
            .iter()
            .filter(|c| c.role == ClassRole::Novel)
            .map(|c| ClassId(c.id))
            .collect()
    }
}

/// In-memory image cache keyed by manifest image id.
pub struct ImageStore {
    images: BTreeMap<u32, ImageTensor>,
}

impl ImageStore {
    /// Load every manifest image from disk relative to `dir`.
    pub fn load(manifest: &DatasetManifest, dir: &Path) -> Result<Self> {
        let mut images = BTreeMap::new();
        for rec in &manifest.images {
            images.insert(rec.id, load_png(&dir.join(&rec.path))?);
        }
        Ok(ImageStore { images })
    }

    pub fn get(&self, id: u32) -> Result<&ImageTensor> {
        self.images
            .get(&id)
            .ok_or_else(|| FpdError::validation(format!("image {id} not loaded")))
    }
}

/// Read a PNG into an (H*W, 3) matrix of [0,1] reals.
pub fn load_png(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| FpdError::Format(format!("png read {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut values = ndarray::Array2::<f64>::zeros((h * w, 3));
    for (x, y, p) in img.enumerate_pixels() {
        let row = y as usize * w + x as usize;
        for ch in 0..3 {
            values[[row, ch]] = p.0[ch] as f64 / 255.0;
        }
    }
    FeatureMap::new(h, w, values)
}

/// Write an (H*W, 3) matrix of [0,1] reals as a PNG.
pub fn save_png(image: &ImageTensor, path: &Path) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let mut out = image::RgbImage::new(w as u32, h as u32);
    let m = image.matrix();
    for y in 0..h {
        for x in 0..w {
            let row = y * w + x;
            let px = image::Rgb([
                (m[[row, 0]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (m[[row, 1]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (m[[row, 2]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ]);
            out.put_pixel(x as u32, y as u32, px);
        }
    }
    out.save(path)
        .map_err(|e| FpdError::Format(format!("png write {}: {e}", path.display())))
}

/// Crop a box out of an image and resize to a square with nearest-neighbor
/// sampling (keeps tiny textures crisp).
pub fn crop_resize(image: &ImageTensor, bbox: &BoundingBox, out_size: usize) -> Result<ImageTensor> {
    let (h, w) = (image.height(), image.width());
    let bw = bbox.x2 - bbox.x1;
    let bh = bbox.y2 - bbox.y1;
    let mut values = ndarray::Array2::<f64>::zeros((out_size * out_size, 3));
    let m = image.matrix();
    for oy in 0..out_size {
        for ox in 0..out_size {
            let sx = bbox.x1 + (ox as f64 + 0.5) * bw / out_size as f64;
            let sy = bbox.y1 + (oy as f64 + 0.5) * bh / out_size as f64;
            let ix = (sx.floor() as isize).clamp(0, w as isize - 1) as usize;
            let iy = (sy.floor() as isize).clamp(0, h as isize - 1) as usize;
            for ch in 0..3 {
                values[[oy * out_size + ox, ch]] = m[[iy * w + ix, ch]];
            }
        }
    }
    FeatureMap::new(out_size, out_size, values)
}

/// SplitMix-style derivation of a per-item seed from a run seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn manifest_roundtrip_is_byte_identical() {
        let manifest = DatasetManifest {
            schema_version: 1,
            seed: 9,
            image_size: [64, 64],
            classes: vec![
                ClassEntry { id: 0, name: "circle-solid".into(), role: ClassRole::Base },
                ClassEntry { id: 1, name: "circle-stripes".into(), role: ClassRole::Novel },
            ],
            images: vec![ImageRecord {
                id: 0,
                path: "images/img_000000.png".into(),
                width: 64,
                height: 64,
                annotations: vec![Annotation { bbox: [3.0, 4.0, 17.0, 18.0], class_id: 0 }],
            }],
            splits: Splits::default(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p1 = manifest.save(dir.path()).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let loaded = DatasetManifest::load(&p1).unwrap();
        let p2 = loaded.save(dir.path()).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn overlapping_splits_fail_validation() {
        let mut manifest = DatasetManifest {
            schema_version: 1,
            seed: 0,
            image_size: [8, 8],
            classes: vec![ClassEntry { id: 0, name: "x".into(), role: ClassRole::Base }],
            images: vec![],
            splits: Splits::default(),
        };
        manifest.splits.train_pool = vec![1, 2];
        manifest.splits.test = vec![2];
        assert!(manifest.validate().is_err());
    }

    #[test]
    fn png_roundtrip_preserves_quantized_values() {
        let mut values = Array2::<f64>::zeros((4 * 4, 3));
        for (i, v) in values.iter_mut().enumerate() {
            *v = ((i * 7) % 256) as f64 / 255.0;
        }
        let img = FeatureMap::new(4, 4, values.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        for (a, b) in back.matrix().iter().zip(values.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn crop_resize_of_uniform_region_is_uniform() {
        let mut values = Array2::<f64>::zeros((8 * 8, 3));
        for y in 2..6 {
            for x in 2..6 {
                for ch in 0..3 {
                    values[[y * 8 + x, ch]] = 0.75;
                }
            }
        }
        let img = FeatureMap::new(8, 8, values).unwrap();
        let crop = crop_resize(&img, &BoundingBox::new(2.0, 2.0, 6.0, 6.0).unwrap(), 4).unwrap();
        assert!(crop.matrix().iter().all(|&v| (v - 0.75).abs() < 1e-12));
    }

    #[test]
    fn derive_seed_changes_with_index() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_eq!(derive_seed(5, 3), derive_seed(5, 3));
    }
}
