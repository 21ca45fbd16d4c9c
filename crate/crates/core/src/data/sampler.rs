//! K-shot split construction and the episode sampler.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{ClassRole, DatasetManifest, ImageStore, ShotRef};
use crate::error::{FpdError, Result};
use crate::types::{
    BoundingBox, ClassId, Episode, GroundTruth, QuerySample, SupportCrop,
};

/// Which split episodes are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    BaseTrain,
    Finetune,
}

#[derive(Clone, Debug)]
pub struct EpisodeConfig {
    pub queries_per_episode: usize,
    /// Shots per class inside an episode.
    pub k: usize,
    /// Square side support crops are resized to.
    pub support_size: usize,
    /// Extra context pixels around the instance box when cropping.
    pub crop_margin: f64,
}

/// Build the K-shot split: marks novel classes, restricts base training to
/// images free of novel objects, and selects exactly K annotated instances
/// per class (base and novel alike) from the train pool.
pub fn make_kshot_split(
    manifest: &DatasetManifest,
    k: usize,
    novel_class_ids: &[ClassId],
    seed: u64,
) -> Result<DatasetManifest> {
    if k == 0 {
        return Err(FpdError::validation("k must be at least 1"));
    }
    let known: Vec<u32> = manifest.classes.iter().map(|c| c.id).collect();
    for c in novel_class_ids {
        if !known.contains(&c.0) {
            return Err(FpdError::validation(format!("unknown novel class {c}")));
        }
    }
    if novel_class_ids.len() >= manifest.classes.len() {
        return Err(FpdError::validation("at least one base class must remain"));
    }

    let mut out = manifest.clone();
    for c in out.classes.iter_mut() {
        c.role = if novel_class_ids.contains(&ClassId(c.id)) {
            ClassRole::Novel
        } else {
            ClassRole::Base
        };
    }

    // base training sees only images without novel-class objects
    let novel_raw: Vec<u32> = novel_class_ids.iter().map(|c| c.0).collect();
    out.splits.base_train = out
        .splits
        .train_pool
        .iter()
        .copied()
        .filter(|id| {
            out.image(*id)
                .map(|img| img.annotations.iter().all(|a| !novel_raw.contains(&a.class_id)))
                .unwrap_or(false)
        })
        .collect();

    // annotation-level candidates per class, from the train pool only
    let mut candidates: BTreeMap<u32, Vec<ShotRef>> = BTreeMap::new();
    for id in &out.splits.train_pool {
        let img = out.image(*id)?;
        for (ann_index, ann) in img.annotations.iter().enumerate() {
            candidates
                .entry(ann.class_id)
                .or_default()
                .push(ShotRef { image_id: *id, ann_index });
        }
    }

    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut shots = Vec::new();
    for class in &out.classes {
        let mut pool = candidates.remove(&class.id).unwrap_or_default();
        if pool.len() < k {
            return Err(FpdError::validation(format!(
                "class {} has only {} annotated instances, need {k}",
                class.name,
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        shots.extend(pool.into_iter().take(k));
    }
    out.splits.finetune_shots = shots;
    out.splits.k = k;
    out.validate()?;
    Ok(out)
}

fn crop_from_annotation(
    manifest: &DatasetManifest,
    images: &ImageStore,
    shot: &ShotRef,
    cfg: &EpisodeConfig,
) -> Result<SupportCrop> {
    let rec = manifest.image(shot.image_id)?;
    let ann = rec
        .annotations
        .get(shot.ann_index)
        .ok_or_else(|| FpdError::validation("shot annotation index out of range"))?;
    let img = images.get(shot.image_id)?;
    let m = cfg.crop_margin;
    let bbox = BoundingBox {
        x1: (ann.bbox[0] - m).max(0.0),
        y1: (ann.bbox[1] - m).max(0.0),
        x2: (ann.bbox[2] + m).min(rec.width as f64),
        y2: (ann.bbox[3] + m).min(rec.height as f64),
    };
    Ok(SupportCrop {
        image: crate::data::crop_resize(img, &bbox, cfg.support_size)?,
        source_image_id: shot.image_id,
    })
}

fn truths_of(manifest: &DatasetManifest, image_id: u32, roster: &[ClassId]) -> Result<Vec<GroundTruth>> {
    let rec = manifest.image(image_id)?;
    let mut truths = Vec::new();
    for ann in &rec.annotations {
        if roster.contains(&ClassId(ann.class_id)) {
            truths.push(GroundTruth {
                bbox: ann.bounding_box()?,
                class_id: ClassId(ann.class_id),
            });
        }
    }
    Ok(truths)
}

/// Sample a training episode from the base split: query images holding at
/// least one roster object, plus K support crops per class drawn from
/// *other* images (no ground-truth leakage).
pub fn sample_base_episode(
    manifest: &DatasetManifest,
    images: &ImageStore,
    cfg: &EpisodeConfig,
    rng: &mut impl Rng,
) -> Result<Episode> {
    let roster = manifest.base_classes();
    if roster.is_empty() {
        return Err(FpdError::validation("no base classes in manifest"));
    }
    let split = &manifest.splits.base_train;
    if split.is_empty() {
        return Err(FpdError::validation("base-train split is empty"));
    }

    // query images containing at least one roster class
    let mut usable: Vec<u32> = split
        .iter()
        .copied()
        .filter(|id| {
            manifest
                .image(*id)
                .map(|img| !img.annotations.is_empty())
                .unwrap_or(false)
        })
        .collect();
    if usable.is_empty() {
        return Err(FpdError::validation("no usable query images in base-train split"));
    }
    usable.shuffle(rng);
    let query_ids: Vec<u32> = usable.into_iter().take(cfg.queries_per_episode).collect();

    // support candidates per class, excluding the sampled query images
    let mut support_crops: BTreeMap<ClassId, Vec<SupportCrop>> = BTreeMap::new();
    for class in &roster {
        let mut pool: Vec<ShotRef> = Vec::new();
        for id in split {
            if query_ids.contains(id) {
                continue;
            }
            let img = manifest.image(*id)?;
            for (ann_index, ann) in img.annotations.iter().enumerate() {
                if ann.class_id == class.0 {
                    pool.push(ShotRef { image_id: *id, ann_index });
                }
            }
        }
        if pool.len() < cfg.k {
            return Err(FpdError::validation(format!(
                "class {class} has {} non-query support instances, need {}",
                pool.len(),
                cfg.k
            )));
        }
        pool.shuffle(rng);
        let crops: Vec<SupportCrop> = pool[..cfg.k]
            .iter()
            .map(|s| crop_from_annotation(manifest, images, s, cfg))
            .collect::<Result<_>>()?;
        support_crops.insert(*class, crops);
    }

    let query_images = query_ids
        .iter()
        .map(|id| {
            Ok(QuerySample {
                image: images.get(*id)?.clone(),
                truths: truths_of(manifest, *id, &roster)?,
                image_id: *id,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let episode = Episode {
        query_images,
        support_crops,
        class_roster: roster,
    };
    episode.validate()?;
    Ok(episode)
}

/// Sample a fine-tuning episode over base-plus-novel classes from the
/// balanced K-shot split. Query annotations are restricted to the selected
/// shots; supports prefer instances from other images but fall back to the
/// query image when K leaves no alternative.
pub fn sample_finetune_episode(
    manifest: &DatasetManifest,
    images: &ImageStore,
    cfg: &EpisodeConfig,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if manifest.splits.k == 0 {
        return Err(FpdError::validation("manifest has no fine-tune split"));
    }
    if cfg.k > manifest.splits.k {
        return Err(FpdError::validation(format!(
            "episode wants {} shots but split holds {}",
            cfg.k, manifest.splits.k
        )));
    }
    let roster = manifest.class_ids();
    let shots = &manifest.splits.finetune_shots;

    let mut shot_images: Vec<u32> = shots.iter().map(|s| s.image_id).collect();
    shot_images.sort_unstable();
    shot_images.dedup();
    shot_images.shuffle(rng);
    let query_ids: Vec<u32> = shot_images
        .into_iter()
        .take(cfg.queries_per_episode)
        .collect();

    // query truths: only shot-selected annotations are visible
    let query_images = query_ids
        .iter()
        .map(|id| {
            let rec = manifest.image(*id)?;
            let mut truths = Vec::new();
            for shot in shots.iter().filter(|s| s.image_id == *id) {
                let ann = &rec.annotations[shot.ann_index];
                truths.push(GroundTruth {
                    bbox: ann.bounding_box()?,
                    class_id: ClassId(ann.class_id),
                });
            }
            Ok(QuerySample {
                image: images.get(*id)?.clone(),
                truths,
                image_id: *id,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut support_crops: BTreeMap<ClassId, Vec<SupportCrop>> = BTreeMap::new();
    for class in &roster {
        let mut of_class: Vec<&ShotRef> = shots
            .iter()
            .filter(|s| {
                manifest
                    .image(s.image_id)
                    .map(|img| img.annotations[s.ann_index].class_id == class.0)
                    .unwrap_or(false)
            })
            .collect();
        // prefer shots that do not come from the sampled query images
        of_class.sort_by_key(|s| (query_ids.contains(&s.image_id), s.image_id, s.ann_index));
        let mut picked: Vec<&ShotRef> = of_class.into_iter().take(cfg.k).collect();
        picked.shuffle(rng);
        if picked.len() < cfg.k {
            return Err(FpdError::validation(format!(
                "class {class} lacks fine-tune shots"
            )));
        }
        let crops = picked
            .into_iter()
            .map(|s| crop_from_annotation(manifest, images, s, cfg))
            .collect::<Result<Vec<_>>>()?;
        support_crops.insert(*class, crops);
    }

    let episode = Episode {
        query_images,
        support_crops,
        class_roster: roster,
    };
    episode.validate()?;
    Ok(episode)
}

/// One evaluation episode: a single test image as the query, with the
/// fine-tune shots of every model class as supports.
pub fn build_eval_episode(
    manifest: &DatasetManifest,
    images: &ImageStore,
    test_image_id: u32,
    roster: &[ClassId],
    cfg: &EpisodeConfig,
) -> Result<Episode> {
    if manifest.splits.k == 0 {
        return Err(FpdError::validation("manifest has no fine-tune split"));
    }
    let shots = &manifest.splits.finetune_shots;
    let mut support_crops: BTreeMap<ClassId, Vec<SupportCrop>> = BTreeMap::new();
    for class in roster {
        let crops: Vec<SupportCrop> = shots
            .iter()
            .filter(|s| {
                manifest
                    .image(s.image_id)
                    .map(|img| img.annotations[s.ann_index].class_id == class.0)
                    .unwrap_or(false)
            })
            .take(cfg.k)
            .map(|s| crop_from_annotation(manifest, images, s, cfg))
            .collect::<Result<_>>()?;
        if crops.len() < cfg.k {
            return Err(FpdError::validation(format!(
                "class {class} has no shots for evaluation"
            )));
        }
        support_crops.insert(*class, crops);
    }

    let truths = truths_of(manifest, test_image_id, roster)?;
    let episode = Episode {
        query_images: vec![QuerySample {
            image: images.get(test_image_id)?.clone(),
            truths,
            image_id: test_image_id,
        }],
        support_crops,
        class_roster: roster.to_vec(),
    };
    episode.validate()?;
    Ok(episode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::render::{generate_synthetic, GenConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_dataset() -> (tempfile::TempDir, DatasetManifest, ImageStore) {
        let cfg = GenConfig {
            num_images: 150,
            min_objects: 2,
            ..GenConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_synthetic(&cfg, 101, dir.path()).unwrap();
        let images = ImageStore::load(&manifest, dir.path()).unwrap();
        (dir, manifest, images)
    }

    #[test]
    fn kshot_split_selects_exactly_k_per_class() {
        let (_dir, manifest, _images) = toy_dataset();
        let novel = vec![ClassId(2), ClassId(5), ClassId(8)];
        let split = make_kshot_split(&manifest, 2, &novel, 3).unwrap();
        assert_eq!(split.splits.k, 2);
        assert_eq!(split.splits.finetune_shots.len(), 2 * split.classes.len());
        assert_eq!(split.novel_classes(), novel);
        // base-train images carry no novel objects
        for id in &split.splits.base_train {
            let img = split.image(*id).unwrap();
            for a in &img.annotations {
                assert!(!novel.contains(&ClassId(a.class_id)));
            }
        }
    }

    #[test]
    fn kshot_split_is_seed_deterministic() {
        let (_dir, manifest, _images) = toy_dataset();
        let novel = vec![ClassId(1)];
        let a = make_kshot_split(&manifest, 3, &novel, 9).unwrap();
        let b = make_kshot_split(&manifest, 3, &novel, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kshot_split_rejects_insufficient_instances() {
        let (_dir, manifest, _images) = toy_dataset();
        let err = make_kshot_split(&manifest, 10_000, &[ClassId(0)], 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("instances"), "{msg}");
    }

    #[test]
    fn finetune_and_test_images_are_disjoint() {
        let (_dir, manifest, _images) = toy_dataset();
        let split = make_kshot_split(&manifest, 2, &[ClassId(0)], 4).unwrap();
        for s in &split.splits.finetune_shots {
            assert!(!split.splits.test.contains(&s.image_id));
        }
    }

    #[test]
    fn base_episode_has_no_support_leakage() {
        let (_dir, manifest, images) = toy_dataset();
        let split = make_kshot_split(&manifest, 2, &[ClassId(8)], 5).unwrap();
        let cfg = EpisodeConfig {
            queries_per_episode: 2,
            k: 2,
            support_size: 32,
            crop_margin: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let ep = sample_base_episode(&split, &images, &cfg, &mut rng).unwrap();
            let query_ids: Vec<u32> = ep.query_images.iter().map(|q| q.image_id).collect();
            for crops in ep.support_crops.values() {
                for c in crops {
                    assert!(!query_ids.contains(&c.source_image_id));
                }
            }
            assert_eq!(ep.validate().unwrap(), 2);
        }
    }

    #[test]
    fn episode_sampling_replays_identically_under_a_seed() {
        let (_dir, manifest, images) = toy_dataset();
        let split = make_kshot_split(&manifest, 2, &[ClassId(3)], 6).unwrap();
        let cfg = EpisodeConfig {
            queries_per_episode: 1,
            k: 2,
            support_size: 32,
            crop_margin: 1.0,
        };
        let run = |seed: u64| -> Vec<u32> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ids = Vec::new();
            for _ in 0..4 {
                let ep = sample_base_episode(&split, &images, &cfg, &mut rng).unwrap();
                ids.extend(ep.query_images.iter().map(|q| q.image_id));
                for crops in ep.support_crops.values() {
                    ids.extend(crops.iter().map(|c| c.source_image_id));
                }
            }
            ids
        };
        assert_eq!(run(77), run(77));
        assert_ne!(run(77), run(78));
    }

    #[test]
    fn finetune_episode_covers_all_classes() {
        let (_dir, manifest, images) = toy_dataset();
        let split = make_kshot_split(&manifest, 3, &[ClassId(2), ClassId(5), ClassId(8)], 2).unwrap();
        let cfg = EpisodeConfig {
            queries_per_episode: 2,
            k: 3,
            support_size: 32,
            crop_margin: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = sample_finetune_episode(&split, &images, &cfg, &mut rng).unwrap();
        assert_eq!(ep.class_roster.len(), 9);
        assert_eq!(ep.validate().unwrap(), 3);
    }

    #[test]
    fn eval_episode_uses_shot_supports() {
        let (_dir, manifest, images) = toy_dataset();
        let split = make_kshot_split(&manifest, 2, &[ClassId(4)], 8).unwrap();
        let cfg = EpisodeConfig {
            queries_per_episode: 1,
            k: 2,
            support_size: 32,
            crop_margin: 1.0,
        };
        let roster = split.class_ids();
        let test_id = split.splits.test[0];
        let ep = build_eval_episode(&split, &images, test_id, &roster, &cfg).unwrap();
        assert_eq!(ep.query_images[0].image_id, test_id);
        assert_eq!(ep.validate().unwrap(), 2);
    }
}
