//! Run configuration schema: strict JSON (unknown keys rejected), with a
//! documented default for every field.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Training strategy variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One block over the whole domain (requires nx * ny == 1).
    SingleBlock,
    /// Shared decoder across blocks, no teacher, no consistency loss.
    ParallelShared,
    /// Private decoder per block, no teacher, no consistency loss.
    Independent,
    /// Shared decoder plus momentum teacher and consistency loss.
    MomentumDistill,
}

/// How per-block decoder gradients combine into the shared update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradCombine {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneCfg {
    /// Seed for the synthetic ground-truth scene.
    pub seed: u64,
    /// Number of ground-truth Gaussians.
    pub n_gt: u32,
    pub domain_min: [f64; 2],
    pub domain_max: [f64; 2],
}

impl Default for SceneCfg {
    fn default() -> Self {
        SceneCfg {
            seed: 7,
            n_gt: 64,
            domain_min: [0.0, 0.0],
            domain_max: [1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraLayout {
    /// Regular grid of viewpoints.
    Grid,
    /// Grid with per-camera positional jitter.
    JitteredGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CamerasCfg {
    pub count: u32,
    pub layout: CameraLayout,
    /// [width, height] in pixels; min side 16 so SSIM windows fit.
    pub resolution: [u32; 2],
    /// Half-extent (zoom) range sampled per camera.
    pub zoom_min: f64,
    pub zoom_max: f64,
    /// Jitter amplitude as a fraction of the camera grid cell.
    pub jitter: f64,
    /// Every k-th camera id is held out from training for evaluation.
    pub holdout_every: u32,
}

impl Default for CamerasCfg {
    fn default() -> Self {
        CamerasCfg {
            count: 40,
            layout: CameraLayout::JitteredGrid,
            resolution: [64, 64],
            zoom_min: 0.10,
            zoom_max: 0.17,
            jitter: 0.35,
            holdout_every: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionCfg {
    /// Splits along x, then y.
    pub nx: u32,
    pub ny: u32,
    /// Extended-region inflation per side, as a fraction of the cell size.
    pub overlap_ratio: f64,
}

impl Default for PartitionCfg {
    fn default() -> Self {
        PartitionCfg {
            nx: 4,
            ny: 2,
            overlap_ratio: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorsCfg {
    /// Grid-fill spacing in world units.
    pub spacing: f64,
    /// Gaussians decoded per anchor.
    pub k_g: u32,
    /// World-unit radius that offsets and decoded scales are expressed in.
    pub base_radius: f64,
    /// Also place anchors at the ground-truth Gaussian centers.
    pub include_gt_centers: bool,
}

impl Default for AnchorsCfg {
    fn default() -> Self {
        AnchorsCfg {
            spacing: 0.15,
            k_g: 8,
            base_radius: 0.12,
            include_gt_centers: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimCfg {
    pub lr_decoder: f64,
    pub lr_feature: f64,
    pub lr_offset: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimCfg {
    fn default() -> Self {
        OptimCfg {
            lr_decoder: 2e-3,
            lr_feature: 5e-3,
            lr_offset: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCfg {
    pub mode: Mode,
    /// Logical worker count k: blocks sampled per phase.
    pub workers: u32,
    /// OS threads used to execute a phase; 0 = one per active block.
    /// Purely an execution detail: results are identical for any value.
    pub threads: u32,
    /// Iterations each sampled group trains before switching (T).
    pub period: u32,
    /// Total logical iterations.
    pub iterations: u64,
    pub lambda_ssim: f64,
    pub lambda_consistency: f64,
    /// Teacher momentum m.
    pub momentum: f64,
    /// EMA coefficient for the per-block metric trackers.
    pub beta_track: f64,
    pub grad_combine: GradCombine,
    pub seed: u64,
    pub optim: OptimCfg,
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg {
            mode: Mode::MomentumDistill,
            workers: 4,
            threads: 0,
            period: 50,
            iterations: 2000,
            lambda_ssim: 0.2,
            lambda_consistency: 50.0,
            momentum: 0.9,
            beta_track: 0.9,
            grad_combine: GradCombine::Sum,
            seed: 7,
            optim: OptimCfg::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightingCfg {
    /// Apply reconstruction-guided block weights to the reconstruction loss.
    pub enabled: bool,
    /// Scale on the squared SSIM deviation (lambda in the weight formula).
    pub lambda: f64,
    /// Deviation bandwidth (sigma in the weight formula), dB-mixed units.
    pub sigma: f64,
    /// Upper clamp on weights; the formula itself stays below 2.
    pub cap: f64,
    /// Use the PSNR deviation; when false it is treated as zero.
    pub use_psnr: bool,
    /// Use the SSIM deviation; when false it is treated as zero.
    pub use_ssim: bool,
}

impl Default for WeightingCfg {
    fn default() -> Self {
        WeightingCfg {
            enabled: true,
            lambda: 100.0,
            sigma: 2.0,
            cap: 2.0,
            use_psnr: true,
            use_ssim: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputCfg {
    pub dir: String,
    pub checkpoint_every: u64,
}

impl Default for OutputCfg {
    fn default() -> Self {
        OutputCfg {
            dir: "out".to_string(),
            checkpoint_every: 500,
        }
    }
}

/// Top-level run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneCfg,
    pub cameras: CamerasCfg,
    pub partition: PartitionCfg,
    pub anchors: AnchorsCfg,
    pub train: TrainCfg,
    pub weighting: WeightingCfg,
    pub output: OutputCfg,
}

impl RunConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(s).map_err(|e| Error::validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn n_blocks(&self) -> u32 {
        self.partition.nx * self.partition.ny
    }

    pub fn validate(&self) -> Result<()> {
        let v = |cond: bool, msg: &str| -> Result<()> {
            if cond {
                Ok(())
            } else {
                Err(Error::validation(msg.to_string()))
            }
        };
        v(self.scene.n_gt >= 1, "scene.n_gt must be >= 1")?;
        v(
            self.scene.domain_max[0] > self.scene.domain_min[0]
                && self.scene.domain_max[1] > self.scene.domain_min[1],
            "scene domain must have positive area",
        )?;
        v(self.cameras.count >= 1, "cameras.count must be >= 1")?;
        v(
            self.cameras.resolution[0] >= 16 && self.cameras.resolution[1] >= 16,
            "cameras.resolution must be at least 16x16",
        )?;
        v(
            self.cameras.zoom_min > 0.0 && self.cameras.zoom_max >= self.cameras.zoom_min,
            "camera zoom range must be positive and ordered",
        )?;
        v(
            (0.0..=0.5).contains(&self.cameras.jitter),
            "cameras.jitter must be in [0, 0.5]",
        )?;
        v(
            self.cameras.holdout_every >= 2,
            "cameras.holdout_every must be >= 2",
        )?;
        v(
            self.partition.nx >= 1 && self.partition.ny >= 1,
            "partition must be at least 1x1",
        )?;
        v(
            (0.0..=0.5).contains(&self.partition.overlap_ratio),
            "partition.overlap_ratio must be in [0, 0.5]",
        )?;
        v(
            self.anchors.spacing > 0.0,
            "anchors.spacing must be positive",
        )?;
        v(self.anchors.k_g >= 1, "anchors.k_g must be >= 1")?;
        v(
            self.anchors.base_radius > 0.0,
            "anchors.base_radius must be positive",
        )?;
        let n = self.n_blocks();
        v(
            self.train.workers >= 1 && self.train.workers <= n,
            "train.workers must satisfy 1 <= k <= n_blocks",
        )?;
        v(self.train.period >= 1, "train.period must be >= 1")?;
        v(
            (0.0..1.0).contains(&self.train.momentum),
            "train.momentum must be in [0, 1)",
        )?;
        v(
            (0.0..1.0).contains(&self.train.beta_track),
            "train.beta_track must be in [0, 1)",
        )?;
        v(
            self.train.lambda_ssim >= 0.0,
            "train.lambda_ssim must be >= 0",
        )?;
        v(
            self.train.lambda_consistency >= 0.0,
            "train.lambda_consistency must be >= 0",
        )?;
        if self.train.mode == Mode::SingleBlock {
            v(n == 1, "mode single_block requires a 1x1 partition")?;
        }
        v(
            self.weighting.sigma > 0.0,
            "weighting.sigma must be positive",
        )?;
        v(
            self.weighting.lambda >= 0.0,
            "weighting.lambda must be >= 0",
        )?;
        v(
            (1.0..=2.0).contains(&self.weighting.cap),
            "weighting.cap must be in [1, 2]",
        )?;
        v(
            self.output.checkpoint_every >= 1,
            "output.checkpoint_every must be >= 1",
        )?;
        Ok(())
    }
}

/// Apply `key=value` overrides with dotted paths onto a config JSON value.
/// Values parse as JSON first, falling back to a bare string.
pub fn apply_override(base: &mut serde_json::Value, path: &str, value: &str) -> Result<()> {
    let parsed: serde_json::Value = serde_json::from_str(value)
        .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
    let mut cur = base;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::validation(format!(
                "empty segment in override path '{path}'"
            )));
        }
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::validation(format!("override path '{path}' hits a non-object"))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(serde_json::json!({}));
    }
    Ok(())
}
