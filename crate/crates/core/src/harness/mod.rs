//! CLI-facing orchestration: run configuration, the two-stage training
//! loops with their freezing policies, evaluation, heatmap export, cost
//! profiling and the multi-seed ablation driver.
//!
//! Every run is reproducible: model init, episode sampling and all
//! stochastic choices derive from the run seed, and each iteration's rng is
//! derived independently so runs can resume mid-stream.

pub mod checkpoint;
pub mod metrics;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::render::{generate_synthetic, GenConfig};
use crate::data::sampler::{
    build_eval_episode, make_kshot_split, sample_base_episode, sample_finetune_episode,
    EpisodeConfig,
};
use crate::data::{DatasetManifest, ImageStore, MANIFEST_FILE};
use crate::detector::{Model, ModelConfig, Variant};
use crate::error::{FpdError, Result};
use crate::eval::{evaluate_detections, EvalReport};
use crate::heatmap::{export_heatmaps, HeatmapExport};
use crate::optim::{FreezePolicy, Sgd};
use crate::profiler::{desk_report, full_scale_report, CostReport, FullScalePreset};
use crate::transfer::{
    compatibility, default_topk, select_and_duplicate, CompatibilityReport, ShotWeightMode,
};
use crate::types::ClassId;

use checkpoint::{load_checkpoint, save_checkpoint};
use metrics::{MetricsRecord, MetricsWriter};

pub const CONFIG_VERSION: u32 = 1;

// seed-stream tags
const SEED_MODEL: u64 = 0x0A;
const SEED_EXPAND: u64 = 0x0B;
const SEED_DATASET: u64 = 0x0D;
const SEED_ITER: u64 = 0x1000;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DatasetSection {
    /// Directory holding `manifest.json` and `images/`.
    pub dir: PathBuf,
    /// Shots per class selected into the fine-tune split.
    pub k: usize,
    /// Novel class ids.
    pub novel: Vec<u32>,
    /// Images rendered by `generate-data`.
    pub gen_images: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            dir: PathBuf::from("data"),
            k: 5,
            novel: vec![6, 7, 8],
            gen_images: 300,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelSection {
    pub d: usize,
    pub d_prime: usize,
    pub n_queries: usize,
    pub n_bg: usize,
    pub variant: Variant,
    pub input_size: usize,
    pub support_size: usize,
    pub shot_weight_mode: ShotWeightMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d: 16,
            d_prime: 16,
            n_queries: 5,
            n_bg: 5,
            variant: Variant::Full,
            input_size: 64,
            support_size: 32,
            shot_weight_mode: ShotWeightMode::PerQuery,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self) -> ModelConfig {
        let mut cfg = ModelConfig::desk_default(self.d, self.variant);
        cfg.d_prime = self.d_prime;
        cfg.n_queries = self.n_queries;
        cfg.n_bg = self.n_bg;
        cfg.backbone.input_size = (self.input_size, self.input_size);
        cfg.backbone.support_size = self.support_size;
        cfg.shot_weight_mode = self.shot_weight_mode;
        cfg
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct StageSection {
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub queries_per_episode: usize,
    /// Support shots carried by each training episode.
    pub episode_shots: usize,
    /// Base stage only: keep the first backbone stage fixed.
    pub freeze_first_stage: bool,
    /// Write intermediate checkpoints every N iterations (0 = never).
    pub checkpoint_every: usize,
}

impl Default for StageSection {
    fn default() -> Self {
        StageSection {
            iterations: 240,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            queries_per_episode: 2,
            episode_shots: 2,
            freeze_first_stage: false,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FinetuneSection {
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub queries_per_episode: usize,
    /// Freeze the region proposal network when K is at most this.
    pub rpn_freeze_max_k: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            iterations: 120,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            queries_per_episode: 2,
            rpn_freeze_max_k: 2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvalSection {
    pub iou: f64,
    /// Cap on test images (0 = all).
    pub max_images: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            iou: 0.5,
            max_images: 0,
        }
    }
}

/// The run configuration file. Desk-scale defaults apply to every omitted
/// field; the full-scale reference schedule (20k/110k iterations, lr 0.004
/// decayed 10x, batch 8 on two GPUs) is documented in the README rather
/// than encoded here.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub base: StageSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn desk_default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 1,
            ..Default::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&body).map_err(|e| FpdError::Format(format!("config parse: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(FpdError::validation(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = toml::to_string_pretty(self)
            .map_err(|e| FpdError::Format(format!("config serialize: {e}")))?;
        fs::write(path, body)?;
        Ok(())
    }

    fn episode_config(&self, k: usize, queries: usize) -> EpisodeConfig {
        EpisodeConfig {
            queries_per_episode: queries,
            k,
            support_size: self.model.support_size,
            crop_margin: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub iterations: usize,
    pub first_loss: f64,
    pub last_loss: f64,
}

fn load_dataset(cfg: &RunConfig) -> Result<(DatasetManifest, ImageStore)> {
    let manifest = DatasetManifest::load(&cfg.dataset.dir.join(MANIFEST_FILE))?;
    let images = ImageStore::load(&manifest, &cfg.dataset.dir)?;
    Ok((manifest, images))
}

/// Render the synthetic dataset and build its K-shot split in one step.
pub fn generate_data(cfg: &RunConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    let gen = GenConfig {
        num_images: cfg.dataset.gen_images,
        image_size: cfg.model.input_size,
        ..GenConfig::default()
    };
    let manifest = generate_synthetic(&gen, seed, out_dir)?;
    let novel: Vec<ClassId> = cfg.dataset.novel.iter().map(|&c| ClassId(c)).collect();
    let split = make_kshot_split(&manifest, cfg.dataset.k, &novel, derive(seed, SEED_DATASET))?;
    split.save(out_dir)?;
    Ok(split)
}

fn derive(seed: u64, tag: u64) -> u64 {
    crate::data::derive_seed(seed, tag)
}

/// Shared training loop over an episode source.
fn train_loop(
    model: &mut Model,
    opt: &mut Sgd,
    frozen: &FreezePolicy,
    seed: u64,
    start_iter: usize,
    iterations: usize,
    checkpoint_every: usize,
    out_dir: &Path,
    mut sample: impl FnMut(&mut ChaCha8Rng) -> Result<crate::types::Episode>,
) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut writer = MetricsWriter::create(&metrics_path)?;
    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;

    for iter in start_iter..start_iter + iterations {
        let iter_seed = derive(seed, SEED_ITER + iter as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(iter_seed);
        let episode = sample(&mut rng)?;
        let fwd = model.forward_train(&episode, &mut rng, frozen).map_err(|e| {
            FpdError::Numerical(format!(
                "iteration {iter} failed (episode seed {iter_seed}): {e}"
            ))
        })?;
        if !fwd.report.total.is_finite() {
            return Err(FpdError::Numerical(format!(
                "non-finite loss at iteration {iter} (episode seed {iter_seed})"
            )));
        }
        let grads = fwd.graph.param_grads(&fwd.graph.backward(fwd.total));
        opt.step(&mut model.store, &grads);

        let v = &fwd.report.values;
        writer.append(&MetricsRecord {
            iter,
            total: fwd.report.total,
            rpn_obj: v.get("rpn_obj").copied().unwrap_or(0.0),
            rpn_box: v.get("rpn_box").copied().unwrap_or(0.0),
            roi_cls: v.get("roi_cls").copied().unwrap_or(0.0),
            roi_box: v.get("roi_box").copied().unwrap_or(0.0),
            meta: v.get("meta").copied().unwrap_or(0.0),
        })?;
        if first_loss.is_nan() {
            first_loss = fwd.report.total;
        }
        last_loss = fwd.report.total;

        if checkpoint_every > 0 && (iter + 1) % checkpoint_every == 0 {
            save_checkpoint(model, iter + 1, &out_dir.join(format!("checkpoint_{:06}.ckpt", iter + 1)))?;
        }
    }

    let ckpt = out_dir.join("checkpoint_final.ckpt");
    save_checkpoint(model, start_iter + iterations, &ckpt)?;
    let (metrics, _rows) = writer.finish()?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        metrics,
        iterations,
        first_loss,
        last_loss,
    })
}

/// Base-stage training over abundant base-class data. All parameters train
/// unless the first backbone stage is conventionally frozen.
pub fn train_base(
    cfg: &RunConfig,
    seed: u64,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    let (manifest, images) = load_dataset(cfg)?;
    if manifest.splits.base_train.is_empty() {
        return Err(FpdError::validation(
            "base-train split is empty; run generate-data first",
        ));
    }
    let (mut model, start_iter) = match resume {
        Some(path) => load_checkpoint(path)?,
        None => (
            Model::new(
                cfg.model.to_model_config(),
                manifest.base_classes(),
                derive(seed, SEED_MODEL),
            )?,
            0,
        ),
    };
    let mut frozen = FreezePolicy::none();
    if cfg.base.freeze_first_stage {
        frozen.freeze_prefix("backbone.mid0.");
    }
    let mut opt = Sgd::new(cfg.base.lr, cfg.base.momentum, cfg.base.weight_decay);
    let ep_cfg = cfg.episode_config(cfg.base.episode_shots, cfg.base.queries_per_episode);
    train_loop(
        &mut model,
        &mut opt,
        &frozen,
        seed,
        start_iter,
        cfg.base.iterations,
        cfg.base.checkpoint_every,
        out_dir,
        |rng| sample_base_episode(&manifest, &images, &ep_cfg, rng),
    )
}

/// Compatibility-transfer initialization for one novel class: weights are
/// summed over the class's K support shots before selection.
fn transfer_queries_for(
    model: &Model,
    manifest: &DatasetManifest,
    images: &ImageStore,
    class: ClassId,
    k: usize,
    ep_cfg: &EpisodeConfig,
) -> Result<ndarray::Array2<f64>> {
    let base_classes = model.classes.clone();
    let (stacked, labels) = model.stacked_queries(&base_classes)?;
    let params = model.projection_params()?;

    let shots: Vec<_> = manifest
        .splits
        .finetune_shots
        .iter()
        .filter(|s| {
            manifest
                .image(s.image_id)
                .map(|img| img.annotations[s.ann_index].class_id == class.0)
                .unwrap_or(false)
        })
        .take(k)
        .collect();
    if shots.is_empty() {
        return Err(FpdError::validation(format!(
            "novel class {class} has no shots in the fine-tune split"
        )));
    }

    let mut total = Array1::<f64>::zeros(stacked.nrows());
    for shot in shots {
        let rec = manifest.image(shot.image_id)?;
        let ann = &rec.annotations[shot.ann_index];
        let bbox = ann.bounding_box()?;
        let crop = crate::data::crop_resize(images.get(shot.image_id)?, &bbox, ep_cfg.support_size)?;
        let mid = model.mid_feature_values(&crop)?;
        let kk = default_topk(mid.positions());
        let report = compatibility(&stacked, &labels, &mid, &params, kk)?;
        total = total + &report.per_query_weight;
    }
    let report = CompatibilityReport {
        per_query_weight: total,
        topk_values: ndarray::Array2::zeros((stacked.nrows(), 1)),
        source_class_of_query: labels,
    };
    Ok(select_and_duplicate(&report, &stacked, model.config.n_queries, class)?.queries)
}

/// Fine-tuning on the balanced K-shot split: novel feature queries are
/// transfer-initialized, the backbone is frozen, and the RPN additionally
/// freezes for very small K.
pub fn finetune_novel(
    cfg: &RunConfig,
    base_checkpoint: &Path,
    k: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let (manifest, images) = load_dataset(cfg)?;
    if manifest.splits.k == 0 {
        return Err(FpdError::validation("manifest has no fine-tune split"));
    }
    if k == 0 || k > manifest.splits.k {
        return Err(FpdError::validation(format!(
            "k = {k} outside 1..={} provided by the split",
            manifest.splits.k
        )));
    }
    let (mut model, _) = load_checkpoint(base_checkpoint)?;
    let novel = manifest.novel_classes();
    if novel.is_empty() {
        return Err(FpdError::validation("manifest defines no novel classes"));
    }
    for c in &novel {
        if model.classes.contains(c) {
            return Err(FpdError::validation(format!(
                "novel class {c} already known to the checkpoint"
            )));
        }
    }

    let ep_cfg = cfg.episode_config(k, cfg.finetune.queries_per_episode);
    let mut additions = Vec::with_capacity(novel.len());
    for c in &novel {
        let queries = if model.config.variant.uses_ffa() {
            Some(transfer_queries_for(&model, &manifest, &images, *c, k, &ep_cfg)?)
        } else {
            None
        };
        additions.push((*c, queries));
    }
    let mut expand_rng = ChaCha8Rng::seed_from_u64(derive(seed, SEED_EXPAND));
    model.expand_classes(&additions, &mut expand_rng)?;

    let mut frozen = FreezePolicy::none();
    frozen.freeze_prefix("backbone.");
    if k <= cfg.finetune.rpn_freeze_max_k {
        frozen.freeze_prefix("rpn.");
    }

    let mut opt = Sgd::new(cfg.finetune.lr, cfg.finetune.momentum, cfg.finetune.weight_decay);
    train_loop(
        &mut model,
        &mut opt,
        &frozen,
        seed,
        0,
        cfg.finetune.iterations,
        0,
        out_dir,
        |rng| sample_finetune_episode(&manifest, &images, &ep_cfg, rng),
    )
}

/// Evaluate a checkpoint on the test split: prototypes integrate the K
/// fine-tune shots once, then every test image runs through the detector.
pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    out_dir: &Path,
) -> Result<EvalReport> {
    let (manifest, images) = load_dataset(cfg)?;
    let (model, _) = load_checkpoint(checkpoint_path)?;
    if manifest.splits.test.is_empty() {
        return Err(FpdError::validation("test split is empty"));
    }
    if manifest.splits.k == 0 {
        return Err(FpdError::validation(
            "manifest has no fine-tune split to draw support shots from",
        ));
    }
    let roster: Vec<ClassId> = model.classes.clone();
    let k = manifest.splits.k;
    let ep_cfg = cfg.episode_config(k, 1);

    let mut test_ids = manifest.splits.test.clone();
    if cfg.eval.max_images > 0 && test_ids.len() > cfg.eval.max_images {
        test_ids.truncate(cfg.eval.max_images);
    }

    let support_episode = build_eval_episode(&manifest, &images, test_ids[0], &roster, &ep_cfg)?;
    let ctx = model.prepare_test_context(&support_episode)?;

    let mut dets_per_image = Vec::with_capacity(test_ids.len());
    let mut truths_per_image = Vec::with_capacity(test_ids.len());
    for id in &test_ids {
        let image = images.get(*id)?;
        dets_per_image.push(model.forward_test_image(image, &ctx)?);
        let rec = manifest.image(*id)?;
        let mut truths = Vec::new();
        for ann in &rec.annotations {
            if roster.contains(&ClassId(ann.class_id)) {
                truths.push(crate::types::GroundTruth {
                    bbox: ann.bounding_box()?,
                    class_id: ClassId(ann.class_id),
                });
            }
        }
        truths_per_image.push(truths);
    }

    let novel = manifest.novel_classes();
    let report = evaluate_detections(&dets_per_image, &truths_per_image, &roster, &novel, cfg.eval.iou);
    fs::create_dir_all(out_dir)?;
    let body = serde_json::to_string_pretty(&report)
        .map_err(|e| FpdError::Format(format!("eval report: {e}")))?;
    fs::write(out_dir.join("eval_report.json"), body + "\n")?;
    Ok(report)
}

/// Export attention heatmaps for the first test image and the support set.
pub fn export_heatmaps_op(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    out_dir: &Path,
) -> Result<HeatmapExport> {
    let (manifest, images) = load_dataset(cfg)?;
    let (model, _) = load_checkpoint(checkpoint_path)?;
    if manifest.splits.test.is_empty() || manifest.splits.k == 0 {
        return Err(FpdError::validation("need a test split and a fine-tune split"));
    }
    let roster: Vec<ClassId> = model.classes.clone();
    let ep_cfg = cfg.episode_config(manifest.splits.k, 1);
    let episode = build_eval_episode(&manifest, &images, manifest.splits.test[0], &roster, &ep_cfg)?;
    export_heatmaps(&model, &episode, out_dir)
}

/// Analytic cost report for a preset name.
pub fn profile_op(cfg: &RunConfig, preset: &str) -> Result<CostReport> {
    match preset {
        "desk" => {
            let classes: Vec<ClassId> = (0..9).map(ClassId).collect();
            desk_report(&cfg.model.to_model_config(), &classes, cfg.dataset.k)
        }
        "voc-full" => Ok(full_scale_report(FullScalePreset::Voc20)),
        "coco-full" => Ok(full_scale_report(FullScalePreset::Coco80)),
        other => Err(FpdError::validation(format!(
            "unknown profile preset '{other}' (desk, voc-full, coco-full)"
        ))),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub k: usize,
    pub seeds: Vec<u64>,
    /// Per-variant novel AP50, one entry per seed.
    pub novel_ap50: BTreeMap<String, Vec<f64>>,
    pub median_novel_ap50: BTreeMap<String, f64>,
    /// full >= bcas+nlf >= bcas >= baseline on the medians.
    pub ordering_ok: bool,
    pub full_minus_baseline: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    if v.is_empty() {
        return f64::NAN;
    }
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Run the component ablation end to end: for each variant and seed, base
/// training, fine-tuning and evaluation on a shared synthetic dataset.
pub fn ablate(
    cfg: &RunConfig,
    seeds: &[u64],
    variants: &[Variant],
    out_dir: &Path,
) -> Result<AblationReport> {
    fs::create_dir_all(out_dir)?;
    let data_dir = out_dir.join("data");
    let mut cfg = cfg.clone();
    if !data_dir.join(MANIFEST_FILE).exists() {
        cfg.dataset.dir = data_dir.clone();
        generate_data(&cfg, cfg.seed, &data_dir)?;
    } else {
        cfg.dataset.dir = data_dir.clone();
    }

    let mut novel_ap50: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &variant in variants {
        let mut vcfg = cfg.clone();
        vcfg.model.variant = variant;
        for &seed in seeds {
            let run_dir = out_dir.join(variant.name()).join(format!("seed{seed}"));
            let base = train_base(&vcfg, seed, &run_dir.join("base"), None)?;
            let ft = finetune_novel(
                &vcfg,
                &base.checkpoint,
                vcfg.dataset.k,
                seed,
                &run_dir.join("finetune"),
            )?;
            let report = evaluate_checkpoint(&vcfg, &ft.checkpoint, &run_dir.join("eval"))?;
            novel_ap50
                .entry(variant.name().to_string())
                .or_default()
                .push(report.map_novel);
        }
    }

    let median_novel_ap50: BTreeMap<String, f64> = novel_ap50
        .iter()
        .map(|(k, v)| (k.clone(), median(v)))
        .collect();

    let get = |name: &str| median_novel_ap50.get(name).copied().unwrap_or(f64::NAN);
    let ordering_ok = get("full") >= get("bcas+nlf")
        && get("bcas+nlf") >= get("bcas")
        && get("bcas") >= get("baseline");
    let report = AblationReport {
        k: cfg.dataset.k,
        seeds: seeds.to_vec(),
        novel_ap50,
        median_novel_ap50,
        ordering_ok,
        full_minus_baseline: get("full") - get("baseline"),
    };
    let body = serde_json::to_string_pretty(&report)
        .map_err(|e| FpdError::Format(format!("ablation report: {e}")))?;
    fs::write(out_dir.join("ablation.json"), body + "\n")?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrip_through_toml() {
        let cfg = RunConfig::desk_default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        cfg.save(&path).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(cfg, loaded);
    }

    #[test]
    fn config_version_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "version = 99\n").unwrap();
        assert!(RunConfig::load(&path).is_err());
    }

    #[test]
    fn median_of_odd_and_even_sets() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
