//! Renderer for the synthetic glyph dataset. Each class is a shape-texture
//! combination, so some class pairs share an outline and differ only in
//! local texture; color varies per instance and carries no class signal.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    derive_seed, save_png, Annotation, ClassEntry, ClassRole, DatasetManifest, ImageRecord,
    Splits, MANIFEST_SCHEMA_VERSION,
};
use crate::error::{FpdError, Result};
use crate::types::FeatureMap;

const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
const TEXTURES: [&str; 3] = ["solid", "stripes", "checker"];

/// Bright instance colors; drawn uniformly, independent of class.
const PALETTE: [[f64; 3]; 6] = [
    [0.95, 0.25, 0.20],
    [0.20, 0.85, 0.30],
    [0.25, 0.45, 0.95],
    [0.95, 0.80, 0.20],
    [0.85, 0.30, 0.85],
    [0.25, 0.85, 0.85],
];

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GenConfig {
    pub num_images: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_shape_size: usize,
    pub max_shape_size: usize,
    /// Fraction of images held out as the test split.
    pub test_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_images: 300,
            image_size: 64,
            min_objects: 1,
            max_objects: 3,
            min_shape_size: 10,
            max_shape_size: 14,
            test_fraction: 0.3,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if class_count() < 3 {
            return Err(FpdError::validation("need at least 3 classes"));
        }
        if self.image_size < 4 * self.max_shape_size {
            return Err(FpdError::validation(format!(
                "image size {} must be at least 4x the max shape size {}",
                self.image_size, self.max_shape_size
            )));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(FpdError::validation("invalid objects-per-image range"));
        }
        if self.min_shape_size < 6 || self.min_shape_size > self.max_shape_size {
            return Err(FpdError::validation("invalid shape size range"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(FpdError::validation("test fraction must lie in [0,1)"));
        }
        Ok(())
    }
}

pub fn class_count() -> usize {
    SHAPES.len() * TEXTURES.len()
}

pub fn class_name(class_id: u32) -> String {
    let shape = SHAPES[class_id as usize / TEXTURES.len()];
    let texture = TEXTURES[class_id as usize % TEXTURES.len()];
    format!("{shape}-{texture}")
}

/// Whether (px, py) relative to the shape's box of side `s` is inside the
/// outline.
fn inside_shape(shape: usize, px: f64, py: f64, s: f64) -> bool {
    match shape {
        0 => {
            let r = s / 2.0;
            let dx = px - r;
            let dy = py - r;
            dx * dx + dy * dy <= r * r
        }
        1 => true,
        2 => {
            // upward isoceles triangle
            let half = s / 2.0;
            let frac = py / s;
            (px - half).abs() <= half * frac
        }
        _ => unreachable!("unknown shape index"),
    }
}

/// Texture intensity multiplier at an absolute pixel position.
fn texture_factor(texture: usize, x: usize, y: usize) -> f64 {
    match texture {
        0 => 1.0,
        1 => {
            if (y / 2) % 2 == 0 {
                1.0
            } else {
                0.25
            }
        }
        2 => {
            if ((x / 2) + (y / 2)) % 2 == 0 {
                1.0
            } else {
                0.25
            }
        }
        _ => unreachable!("unknown texture index"),
    }
}

/// Render one object into the pixel buffer; returns its tight box.
fn draw_object(
    pixels: &mut Array2<f64>,
    image_size: usize,
    class_id: u32,
    x0: usize,
    y0: usize,
    s: usize,
    color: [f64; 3],
) -> [f64; 4] {
    let shape = class_id as usize / TEXTURES.len();
    let texture = class_id as usize % TEXTURES.len();
    for dy in 0..s {
        for dx in 0..s {
            let px = dx as f64 + 0.5;
            let py = dy as f64 + 0.5;
            if !inside_shape(shape, px, py, s as f64) {
                continue;
            }
            let x = x0 + dx;
            let y = y0 + dy;
            let f = texture_factor(texture, x, y);
            let row = y * image_size + x;
            for ch in 0..3 {
                pixels[[row, ch]] = color[ch] * f;
            }
        }
    }
    [x0 as f64, y0 as f64, (x0 + s) as f64, (y0 + s) as f64]
}

fn boxes_overlap(a: &[f64; 4], b: &[f64; 4], max_iou: f64) -> bool {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    inter / (area_a + area_b - inter) > max_iou
}

/// Render one image with its annotations from a per-image rng.
pub fn render_image(
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> (FeatureMap, Vec<Annotation>) {
    let n = cfg.image_size;
    // dark noisy background
    let mut pixels = Array2::<f64>::zeros((n * n, 3));
    for v in pixels.iter_mut() {
        *v = 0.12 + rng.gen::<f64>() * 0.06;
    }

    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut annotations: Vec<Annotation> = Vec::new();
    let mut boxes: Vec<[f64; 4]> = Vec::new();
    for _ in 0..count {
        let class_id = rng.gen_range(0..class_count()) as u32;
        let s = rng.gen_range(cfg.min_shape_size..=cfg.max_shape_size);
        let mut placed = false;
        for _attempt in 0..20 {
            let x0 = rng.gen_range(1..n - s - 1);
            let y0 = rng.gen_range(1..n - s - 1);
            let candidate = [x0 as f64, y0 as f64, (x0 + s) as f64, (y0 + s) as f64];
            if boxes.iter().any(|b| boxes_overlap(b, &candidate, 0.1)) {
                continue;
            }
            let color = PALETTE[rng.gen_range(0..PALETTE.len())];
            let bbox = draw_object(&mut pixels, n, class_id, x0, y0, s, color);
            boxes.push(bbox);
            annotations.push(Annotation { bbox, class_id });
            placed = true;
            break;
        }
        if !placed {
            // image stays valid with fewer objects
            continue;
        }
    }
    let image = FeatureMap::new(n, n, pixels).expect("rendered image is well-formed");
    (image, annotations)
}

/// Generate the dataset under `out_dir`: PNG files plus `manifest.json`.
/// Deterministic for a given seed.
pub fn generate_synthetic(cfg: &GenConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir)?;

    let mut images = Vec::with_capacity(cfg.num_images);
    for idx in 0..cfg.num_images {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, idx as u64));
        // re-render until at least one object placed, so every image is a
        // usable query image
        let (image, annotations) = loop {
            let (image, annotations) = render_image(cfg, &mut rng);
            if !annotations.is_empty() {
                break (image, annotations);
            }
        };
        let path = format!("images/img_{idx:06}.png");
        save_png(&image, &out_dir.join(&path))?;
        images.push(ImageRecord {
            id: idx as u32,
            path,
            width: cfg.image_size as u32,
            height: cfg.image_size as u32,
            annotations,
        });
    }

    // seeded split into train pool and test
    let mut order: Vec<u32> = (0..cfg.num_images as u32).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    use rand::seq::SliceRandom;
    order.shuffle(&mut split_rng);
    let test_count = ((cfg.num_images as f64) * cfg.test_fraction).round() as usize;
    let mut test: Vec<u32> = order[..test_count].to_vec();
    let mut train_pool: Vec<u32> = order[test_count..].to_vec();
    test.sort_unstable();
    train_pool.sort_unstable();

    let classes = (0..class_count() as u32)
        .map(|id| ClassEntry {
            id,
            name: class_name(id),
            role: ClassRole::Base,
        })
        .collect();

    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        seed,
        image_size: [cfg.image_size, cfg.image_size],
        classes,
        images,
        splits: Splits {
            train_pool,
            test,
            base_train: vec![],
            finetune_shots: vec![],
            k: 0,
        },
    };
    manifest.validate()?;
    manifest.save(out_dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn generation_is_deterministic_per_seed() {
        let cfg = GenConfig {
            num_images: 6,
            ..GenConfig::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_synthetic(&cfg, 33, d1.path()).unwrap();
        let m2 = generate_synthetic(&cfg, 33, d2.path()).unwrap();
        assert_eq!(m1, m2);
        let b1 = std::fs::read(d1.path().join(MANIFEST_FILE_NAME)).unwrap();
        let b2 = std::fs::read(d2.path().join(MANIFEST_FILE_NAME)).unwrap();
        assert_eq!(b1, b2);
        // pixel-level determinism of one image file
        let p1 = std::fs::read(d1.path().join(&m1.images[0].path)).unwrap();
        let p2 = std::fs::read(d2.path().join(&m2.images[0].path)).unwrap();
        assert_eq!(p1, p2);
    }

    const MANIFEST_FILE_NAME: &str = super::super::MANIFEST_FILE;

    #[test]
    fn annotations_stay_inside_bounds() {
        let cfg = GenConfig {
            num_images: 20,
            ..GenConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(&cfg, 7, dir.path()).unwrap();
        for img in &m.images {
            assert!(!img.annotations.is_empty());
            for a in &img.annotations {
                assert!(a.bbox[0] >= 0.0 && a.bbox[1] >= 0.0);
                assert!(a.bbox[2] <= img.width as f64 && a.bbox[3] <= img.height as f64);
            }
        }
    }

    #[test]
    fn class_frequencies_are_roughly_uniform() {
        let cfg = GenConfig::default();
        // render 1000 images without touching disk
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        let mut total = 0usize;
        for idx in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(15, idx));
            let (_img, anns) = render_image(&cfg, &mut rng);
            for a in anns {
                *counts.entry(a.class_id).or_insert(0) += 1;
                total += 1;
            }
        }
        let expected = total as f64 / class_count() as f64;
        for (_c, n) in counts {
            let ratio = n as f64 / expected;
            assert!((0.9..=1.1).contains(&ratio), "class frequency ratio {ratio}");
        }
    }

    #[test]
    fn shape_texture_pairs_share_outline() {
        // same shape, different texture => same class name prefix
        assert_eq!(class_name(0), "circle-solid");
        assert_eq!(class_name(1), "circle-stripes");
        assert_eq!(class_name(4), "square-stripes");
        assert_eq!(class_count(), 9);
    }

    #[test]
    fn undersized_image_config_is_rejected() {
        let cfg = GenConfig {
            image_size: 32,
            max_shape_size: 14,
            ..GenConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
