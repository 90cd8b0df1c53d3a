//! Operator surface: the subcommand implementations behind the binary, plus
//! the dataset manifest and ablation file schemas.

use crate::config::{apply_override, RunConfig};
use crate::error::{Error, Result};
use crate::geom::SceneDomain;
use crate::imageio;
use crate::metrics::MetricReport;
use crate::render::{Image, RenderSettings};
use crate::scene::{assemble_world, SceneFile, World};
use crate::train::{evaluate_merged, render_merged, seam_statistic, MergedModel, Trainer};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const MANIFEST_VERSION: u32 = 1;

/// Environment variable overriding the root that output directories resolve
/// under.
pub const OUT_ROOT_ENV: &str = "BLOCKSPLAT_OUT_ROOT";

/// Resolve an output directory against the optional environment root.
pub fn resolve_out_dir(dir: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestImage {
    pub id: u32,
    pub ppm: String,
    pub f64: String,
}

/// Dataset manifest written by `generate` and consumed by `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub scene: String,
    pub resolution: [u32; 2],
    pub train_ids: Vec<u32>,
    pub holdout_ids: Vec<u32>,
    pub block_views: Vec<Vec<u32>>,
    pub images: Vec<ManifestImage>,
}

impl DatasetManifest {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let m: DatasetManifest =
            serde_json::from_str(s).map_err(|e| Error::format(format!("manifest: {e}")))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::format(format!(
                "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                m.version
            )));
        }
        Ok(m)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load a config file (or defaults when `path` is None) and apply overrides.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut value: serde_json::Value = match path {
        Some(p) => serde_json::from_str(&read_to_string(p)?)
            .map_err(|e| Error::validation(format!("config {}: {e}", p.display())))?,
        None => serde_json::to_value(RunConfig::default()).expect("default config"),
    };
    for (k, v) in overrides {
        apply_override(&mut value, k, v)?;
    }
    let cfg: RunConfig =
        serde_json::from_value(value).map_err(|e| Error::validation(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn gt_image_name(id: u32) -> (String, String) {
    (format!("gt/cam_{id:03}.ppm"), format!("gt/cam_{id:03}.f64"))
}

/// Generate the dataset: scene.json, ground-truth images, and the manifest.
pub fn cmd_generate(cfg: &RunConfig, out_dir: &Path) -> Result<World> {
    let world = crate::scene::build_world(cfg)?;
    let scene = SceneFile::from_world(cfg, &world);
    write_file(
        &out_dir.join("scene.json"),
        scene.to_json_string().as_bytes(),
    )?;
    let mut images = Vec::new();
    for cam in &world.dataset.cameras {
        let img = world.dataset.gt_for(cam.id);
        let (ppm, f64name) = gt_image_name(cam.id);
        write_file(&out_dir.join(&ppm), &imageio::encode_ppm(img))?;
        write_file(&out_dir.join(&f64name), &imageio::encode_f64_image(img))?;
        images.push(ManifestImage {
            id: cam.id,
            ppm,
            f64: f64name,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        scene: "scene.json".to_string(),
        resolution: cfg.cameras.resolution,
        train_ids: world.dataset.train_ids.clone(),
        holdout_ids: world.dataset.holdout_ids.clone(),
        block_views: world.dataset.block_views.clone(),
        images,
    };
    write_file(
        &out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)
            .expect("manifest")
            .as_bytes(),
    )?;
    Ok(world)
}

/// Load a generated dataset back into a world, verifying it against the
/// config (partition must match what the scene was generated with).
pub fn load_dataset(cfg: &RunConfig, dataset_dir: &Path) -> Result<World> {
    let manifest =
        DatasetManifest::from_json_str(&read_to_string(&dataset_dir.join("manifest.json"))?)?;
    let scene = SceneFile::from_json_str(&read_to_string(&dataset_dir.join(&manifest.scene))?)?;
    if scene.partition != cfg.partition {
        return Err(Error::validation(format!(
            "dataset was generated with partition {:?}, config asks for {:?}",
            scene.partition, cfg.partition
        )));
    }
    let domain = SceneDomain::new(scene.domain.bounds)?;
    let world = assemble_world(cfg, domain, scene.gaussians, scene.cameras)?;
    // The manifest must agree with the recomputed assignment; a stale or
    // edited manifest is rejected rather than silently reinterpreted.
    if manifest.train_ids != world.dataset.train_ids
        || manifest.holdout_ids != world.dataset.holdout_ids
        || manifest.block_views != world.dataset.block_views
    {
        return Err(Error::validation(
            "manifest does not match the dataset recomputed from scene.json".to_string(),
        ));
    }
    // Ground truth comes from the lossless sidecars.
    let mut world = world;
    for entry in &manifest.images {
        let img = imageio::decode_f64_image(&read_file(&dataset_dir.join(&entry.f64))?)?;
        if entry.id as usize >= world.dataset.gt_images.len() {
            return Err(Error::validation(format!(
                "manifest image id {} out of range",
                entry.id
            )));
        }
        world.dataset.gt_images[entry.id as usize] = img;
    }
    Ok(world)
}

pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub iterations: u64,
}

/// Train per config over a generated dataset; writes checkpoints and the
/// metrics log under `out_dir`.
pub fn cmd_train(
    cfg: &RunConfig,
    dataset_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    let world = load_dataset(cfg, dataset_dir)?;
    let mut trainer = match resume {
        Some(ckpt) => Trainer::from_checkpoint(cfg.clone(), world, &read_file(ckpt)?)?,
        None => Trainer::new(cfg.clone(), world)?,
    };
    let ckpt_dir = out_dir.join("checkpoints");
    let mut last = PathBuf::new();
    trainer.run(|iter, bytes| {
        let path = ckpt_dir.join(format!("ckpt_{iter:06}.bin"));
        write_file(&path, bytes)?;
        last = path;
        Ok(())
    })?;
    let csv_path = out_dir.join("metrics.csv");
    write_file(&csv_path, trainer.csv().as_bytes())?;
    Ok(TrainOutcome {
        final_checkpoint: last,
        metrics_csv: csv_path,
        iterations: trainer.iteration,
    })
}

fn merged_from_checkpoint(
    cfg: &RunConfig,
    world: World,
    ckpt: &Path,
) -> Result<(MergedModel, World)> {
    let trainer = Trainer::from_checkpoint(cfg.clone(), world, &read_file(ckpt)?)?;
    let merged = trainer.merged()?;
    Ok((merged, trainer.world))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub cameras: String,
    pub count: usize,
    pub mean: MetricReport,
    pub per_camera: Vec<(u32, MetricReport)>,
    pub seam: Option<f64>,
}

/// Evaluate a checkpoint (or the ground-truth renderer itself with
/// `gt_mode`) on the holdout or training views.
pub fn cmd_eval(
    cfg: &RunConfig,
    dataset_dir: &Path,
    checkpoint: Option<&Path>,
    use_train_views: bool,
    gt_mode: bool,
    report_path: Option<&Path>,
) -> Result<EvalReport> {
    let world = load_dataset(cfg, dataset_dir)?;
    let ids: Vec<u32> = if use_train_views {
        world.dataset.train_ids.clone()
    } else {
        world.dataset.holdout_ids.clone()
    };
    let (reports, mean, seam) = if gt_mode {
        let renders: Vec<Image> = ids
            .iter()
            .map(|&id| {
                crate::scene::render_ground_truth(
                    &world.gaussians,
                    &world.dataset.cameras[id as usize],
                )
            })
            .collect::<Result<_>>()?;
        let gts: Vec<Image> = ids
            .iter()
            .map(|&id| world.dataset.gt_for(id).clone())
            .collect();
        let (r, m) = crate::train::evaluate_images(&renders, &gts)?;
        (r, m, None)
    } else {
        let ckpt =
            checkpoint.ok_or_else(|| Error::validation("eval needs --checkpoint (or --gt)"))?;
        let (merged, world) = merged_from_checkpoint(cfg, world, ckpt)?;
        let (r, m) = evaluate_merged(&merged, &world, &ids)?;
        let seam = seam_statistic(&merged, &world, cfg.partition.nx, cfg.partition.ny)?;
        (r, m, Some(seam))
    };
    let report = EvalReport {
        cameras: if use_train_views { "train" } else { "holdout" }.to_string(),
        count: ids.len(),
        mean,
        per_camera: ids.into_iter().zip(reports).collect(),
        seam,
    };
    if let Some(p) = report_path {
        write_file(
            p,
            serde_json::to_string_pretty(&report)
                .expect("report")
                .as_bytes(),
        )?;
    }
    Ok(report)
}

/// Render views from a checkpoint into PPM files.
pub fn cmd_render(
    cfg: &RunConfig,
    dataset_dir: &Path,
    checkpoint: &Path,
    out_dir: &Path,
    camera: Option<u32>,
) -> Result<Vec<PathBuf>> {
    let world = load_dataset(cfg, dataset_dir)?;
    let (merged, world) = merged_from_checkpoint(cfg, world, checkpoint)?;
    let ids: Vec<u32> = match camera {
        Some(id) => {
            if id as usize >= world.dataset.cameras.len() {
                return Err(Error::validation(format!("camera {id} out of range")));
            }
            vec![id]
        }
        None => world.dataset.cameras.iter().map(|c| c.id).collect(),
    };
    let mut out = Vec::new();
    for id in ids {
        let cam = &world.dataset.cameras[id as usize];
        let img = render_merged(&merged, cam, &world.domain, &RenderSettings::default())?;
        let path = out_dir.join(format!("render_{id:03}.ppm"));
        write_file(&path, &imageio::encode_ppm(&img))?;
        out.push(path);
    }
    Ok(out)
}

/// Merge a training checkpoint and write the merged model file.
pub fn cmd_merge(
    cfg: &RunConfig,
    dataset_dir: &Path,
    checkpoint: &Path,
    out: &Path,
) -> Result<usize> {
    let world = load_dataset(cfg, dataset_dir)?;
    let (merged, _) = merged_from_checkpoint(cfg, world, checkpoint)?;
    write_file(out, &crate::train::encode_merged(&merged))?;
    Ok(merged.anchors.len())
}

/// Text table describing the partition and view assignment.
pub fn cmd_partition(cfg: &RunConfig) -> Result<String> {
    let world = crate::scene::build_world(cfg)?;
    let mut out = String::new();
    out.push_str("block  core                                  extended                              anchors  views\n");
    for (b, views) in world.blocks.iter().zip(&world.dataset.block_views) {
        out.push_str(&format!(
            "{:<6} [{:.3},{:.3}]x[{:.3},{:.3}]  [{:.3},{:.3}]x[{:.3},{:.3}]  {:<7}  {:?}\n",
            b.id,
            b.core.min[0],
            b.core.max[0],
            b.core.min[1],
            b.core.max[1],
            b.extended.min[0],
            b.extended.max[0],
            b.extended.min[1],
            b.extended.max[1],
            b.anchors.len(),
            views
        ));
    }
    out.push_str(&format!(
        "cameras: {} train / {} holdout\n",
        world.dataset.train_ids.len(),
        world.dataset.holdout_ids.len()
    ));
    Ok(out)
}

/// Run the gradient verification suite; returns (summary text, all passed).
pub fn cmd_gradcheck(seed: u64) -> Result<(String, bool)> {
    let outcomes = crate::verify::run_suite(seed)?;
    let mut all = true;
    let mut out = String::new();
    for o in &outcomes {
        all &= o.pass;
        out.push_str(&format!(
            "{:<12} {}  max_rel_err={:.3e}  within_tol={}/{} (skipped {})\n",
            o.name,
            if o.pass { "PASS" } else { "FAIL" },
            o.report.max_rel_err,
            o.report.within_tol,
            o.report.coords_checked,
            o.report.coords_zero_both
        ));
    }
    Ok((out, all))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMetric {
    PsnrHoldout,
    SsimHoldout,
    PsnrTrain,
    SsimTrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationVariant {
    pub name: String,
    /// Dotted config paths to JSON values.
    pub overrides: BTreeMap<String, serde_json::Value>,
}

/// Named config variants compared over a common set of seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub name: String,
    pub variants: Vec<AblationVariant>,
    pub seeds: Vec<u64>,
    pub metric: AblationMetric,
}

impl AblationSpec {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let spec: AblationSpec =
            serde_json::from_str(s).map_err(|e| Error::format(format!("ablation spec: {e}")))?;
        if spec.variants.len() < 2 {
            return Err(Error::validation("ablation needs at least 2 variants"));
        }
        if spec.seeds.len() < 2 {
            return Err(Error::validation("ablation needs at least 2 seeds"));
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub name: String,
    pub metric: AblationMetric,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let mut out = format!("ablation: {}  metric: {:?}\n", self.name, self.metric);
        out.push_str("variant                         mean      std       per-seed\n");
        for r in &self.rows {
            let seeds: Vec<String> = r
                .per_seed
                .iter()
                .map(|(s, v)| format!("{s}:{v:.3}"))
                .collect();
            out.push_str(&format!(
                "{:<30}  {:<8.4}  {:<8.4}  {}\n",
                r.variant,
                r.mean,
                r.std,
                seeds.join(" ")
            ));
        }
        out
    }
}

/// Apply a variant's overrides plus the per-run seed to a base config.
pub fn variant_config(base: &RunConfig, variant: &AblationVariant, seed: u64) -> Result<RunConfig> {
    let mut value = serde_json::to_value(base).expect("config value");
    apply_override(&mut value, "scene.seed", &seed.to_string())?;
    apply_override(&mut value, "train.seed", &seed.to_string())?;
    for (k, v) in &variant.overrides {
        apply_override(&mut value, k, &v.to_string())?;
    }
    let cfg: RunConfig = serde_json::from_value(value)
        .map_err(|e| Error::validation(format!("variant {}: {e}", variant.name)))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Train one variant in memory and measure the requested metric.
pub fn run_variant(cfg: &RunConfig, metric: AblationMetric) -> Result<f64> {
    let world = crate::scene::build_world(cfg)?;
    let mut trainer = Trainer::new(cfg.clone(), world)?;
    while trainer.iteration < cfg.train.iterations {
        trainer.step()?;
    }
    let merged = trainer.merged()?;
    let ids = match metric {
        AblationMetric::PsnrHoldout | AblationMetric::SsimHoldout => {
            trainer.world.dataset.holdout_ids.clone()
        }
        AblationMetric::PsnrTrain | AblationMetric::SsimTrain => {
            trainer.world.dataset.train_ids.clone()
        }
    };
    let (_, mean) = evaluate_merged(&merged, &trainer.world, &ids)?;
    Ok(match metric {
        AblationMetric::PsnrHoldout | AblationMetric::PsnrTrain => mean.psnr,
        AblationMetric::SsimHoldout | AblationMetric::SsimTrain => mean.ssim,
    })
}

/// Run the full variant-by-seed matrix and aggregate mean and std.
pub fn cmd_ablate(
    base: &RunConfig,
    spec: &AblationSpec,
    out_dir: Option<&Path>,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for variant in &spec.variants {
        let mut per_seed = Vec::new();
        for &seed in &spec.seeds {
            let cfg = variant_config(base, variant, seed)?;
            let value = run_variant(&cfg, spec.metric)?;
            per_seed.push((seed, value));
        }
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().map(|(_, v)| v).sum::<f64>() / n;
        let var = per_seed
            .iter()
            .map(|(_, v)| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        rows.push(AblationRow {
            variant: variant.name.clone(),
            per_seed,
            mean,
            std: var.sqrt(),
        });
    }
    let report = AblationReport {
        name: spec.name.clone(),
        metric: spec.metric,
        rows,
    };
    if let Some(dir) = out_dir {
        write_file(
            &dir.join("ablation.json"),
            serde_json::to_string_pretty(&report)
                .expect("report")
                .as_bytes(),
        )?;
        write_file(&dir.join("ablation.txt"), report.table().as_bytes())?;
    }
    Ok(report)
}

/// Process exit code for an error, per the documented contract:
/// 2 invalid input, 3 numerical failure, 4 I/O.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Validation(_)
        | Error::Format(_)
        | Error::Shape(_)
        | Error::Contract(_)
        | Error::Partition(_) => 2,
        Error::Numerics(_) => 3,
        Error::Io { .. } => 4,
    }
}
