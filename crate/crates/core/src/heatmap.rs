//! Attention heatmap export: per-feature-query affinity maps over support
//! crops, and channel-sum maps of query features before and after
//! prototype assignment. All rendered values are normalized to [0, 1] and
//! written as grayscale PNGs with nearest-neighbor upsampling.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::detector::Model;
use crate::error::{FpdError, Result};
use crate::ffa;
use crate::types::{ClassId, Episode, FeatureMap, FeatureQuerySet};

/// Min-max normalize into [0, 1]; an all-constant map becomes all zeros.
pub fn normalize_unit(values: &Array2<f64>) -> Array2<f64> {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in values.iter() {
        min = min.min(v);
        max = max.max(v);
    }
    if !(max > min) {
        return Array2::zeros(values.dim());
    }
    values.mapv(|v| (v - min) / (max - min))
}

/// Nearest-neighbor upsample of an (h, w) grid to (out_h, out_w).
pub fn upsample_nearest(grid: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = grid.dim();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let sy = (y * h) / out_h;
        let sx = (x * w) / out_w;
        grid[[sy.min(h - 1), sx.min(w - 1)]]
    })
}

/// Sum a feature map over channels and normalize to [0, 1]; returns the
/// (h, w) grid.
pub fn channel_sum_heatmap(map: &FeatureMap) -> Array2<f64> {
    let (h, w) = (map.height(), map.width());
    let mut grid = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            grid[[y, x]] = map.matrix().row(y * w + x).sum();
        }
    }
    normalize_unit(&grid)
}

/// Difference map (after minus before) summed over channels, normalized.
/// With a zero residual gate this is exactly zero everywhere.
pub fn assigned_delta_heatmap(before: &FeatureMap, after: &FeatureMap) -> Array2<f64> {
    let (h, w) = (before.height(), before.width());
    let mut grid = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let row = y * w + x;
            let mut acc = 0.0;
            for ch in 0..before.channels() {
                acc += after.matrix()[[row, ch]] - before.matrix()[[row, ch]];
            }
            grid[[y, x]] = acc;
        }
    }
    normalize_unit(&grid)
}

/// Write a [0,1] grid as an 8-bit grayscale PNG.
pub fn save_gray_png(values: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = values.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (values[[y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path)
        .map_err(|e| FpdError::Format(format!("png write {}: {e}", path.display())))
}

/// One exported support-side heatmap with its pre-upsampling grid size.
#[derive(Clone, Debug)]
pub struct SupportHeatmap {
    pub class_id: ClassId,
    pub query_index: usize,
    /// Affinity grid dims before upsampling (support feature dims).
    pub grid: (usize, usize),
    pub path: PathBuf,
}

#[derive(Clone, Debug, Default)]
pub struct HeatmapExport {
    pub support_maps: Vec<SupportHeatmap>,
    pub query_maps: Vec<PathBuf>,
}

/// Render per-query affinity maps over each roster class's first support
/// crop, plus channel-sum maps of each query image's features before and
/// after assignment.
pub fn export_heatmaps(model: &Model, episode: &Episode, out_dir: &Path) -> Result<HeatmapExport> {
    if !model.config.variant.uses_ffa() {
        return Err(FpdError::validation(
            "heatmap export needs the fine-grained aggregation variant",
        ));
    }
    episode.validate()?;
    fs::create_dir_all(out_dir)?;
    let params = model.projection_params()?;
    let mut export = HeatmapExport::default();

    for class in &episode.class_roster {
        let crop = &episode.support_crops[class][0];
        let mid = model.mid_feature_values(&crop.image)?;
        let queries = FeatureQuerySet {
            class_id: *class,
            queries: model.store.get(&format!("ffa.query.{class}")).clone(),
        };
        let (aff, _protos) = ffa::distill_prototypes(&mid, &queries, &params)?;
        for qi in 0..queries.n() {
            let row = aff.values.row(qi);
            let grid = Array2::from_shape_fn((mid.height(), mid.width()), |(y, x)| {
                row[y * mid.width() + x]
            });
            let up = upsample_nearest(
                &normalize_unit(&grid),
                crop.image.height(),
                crop.image.width(),
            );
            let path = out_dir.join(format!("support_{class}_q{qi}.png"));
            save_gray_png(&up, &path)?;
            export.support_maps.push(SupportHeatmap {
                class_id: *class,
                query_index: qi,
                grid: (mid.height(), mid.width()),
                path,
            });
        }
    }

    // query-side maps: features before assignment and the assigned delta
    let ctx = model.prepare_test_context(episode)?;
    let bank = ctx.bank.as_ref().expect("ffa variant has a bank");
    for (i, q) in episode.query_images.iter().enumerate() {
        let mid = model.mid_feature_values(&q.image)?;
        let (_aff, assigned) = ffa::assign_prototypes(&mid, bank, &params)?;

        let base = channel_sum_heatmap(&mid);
        let base_up = upsample_nearest(&base, q.image.height(), q.image.width());
        let base_path = out_dir.join(format!("query_{i}_features.png"));
        save_gray_png(&base_up, &base_path)?;
        export.query_maps.push(base_path);

        let delta = assigned_delta_heatmap(&mid, &assigned);
        let delta_up = upsample_nearest(&delta, q.image.height(), q.image.width());
        let delta_path = out_dir.join(format!("query_{i}_assigned.png"));
        save_gray_png(&delta_up, &delta_path)?;
        export.query_maps.push(delta_path);
    }
    Ok(export)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn normalization_maps_to_unit_interval() {
        let grid = array![[1.0, 5.0], [3.0, -1.0]];
        let n = normalize_unit(&grid);
        assert_eq!(n[[1, 1]], 0.0);
        assert_eq!(n[[0, 1]], 1.0);
        assert!(n.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn constant_map_normalizes_to_zeros() {
        let grid = Array2::from_elem((3, 3), 0.7);
        assert!(normalize_unit(&grid).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsample_repeats_cells() {
        let grid = array![[0.0, 1.0]];
        let up = upsample_nearest(&grid, 2, 4);
        assert_eq!(up[[0, 0]], 0.0);
        assert_eq!(up[[0, 1]], 0.0);
        assert_eq!(up[[1, 2]], 1.0);
        assert_eq!(up[[1, 3]], 1.0);
    }

    #[test]
    fn identical_maps_give_zero_delta() {
        let m = FeatureMap::new(2, 2, array![[1.0], [2.0], [3.0], [4.0]]).unwrap();
        let delta = assigned_delta_heatmap(&m, &m);
        assert!(delta.iter().all(|&v| v == 0.0));
    }
}
