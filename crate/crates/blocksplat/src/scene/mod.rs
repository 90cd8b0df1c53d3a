//! The flatland world: synthetic ground-truth Gaussians, cameras, the grid
//! partition into blocks with extended boundary regions, visibility-based
//! view assignment, and anchor initialization.

mod partition;
mod synth;

pub use partition::{assign_views, core_owns, partition, Block};
pub use synth::{generate_synthetic_scene, gt_splats, render_ground_truth, GroundTruthGaussian};

use crate::autodiff::Tensor;
use crate::config::{CameraLayout, RunConfig};
use crate::error::{Error, Result};
use crate::geom::{derive_rng, Camera, SceneDomain};
use crate::render::Image;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Anchor feature width (decoder input contract).
pub const FEATURE_DIM: usize = 32;

/// A fixed spatial point carrying a learnable feature vector and learnable
/// per-slot offsets that spawn neural Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    /// Spawn id, shared by copies of this anchor in overlapping blocks.
    pub id: u64,
    pub position: [f64; 2],
    pub base_radius: f64,
    /// Learnable, length [`FEATURE_DIM`].
    pub feature: Tensor,
    /// Learnable, shape [k_g, 2], in units of `base_radius`.
    pub offsets: Tensor,
}

impl Anchor {
    pub fn k_g(&self) -> usize {
        self.offsets.shape()[0]
    }
}

/// Generate the camera rig from config: a (jittered) grid of square
/// viewports over the domain with per-camera zoom.
pub fn make_cameras(cfg: &RunConfig, domain: &SceneDomain) -> Result<Vec<Camera>> {
    let count = cfg.cameras.count;
    let gx = (count as f64).sqrt().ceil() as u32;
    let gy = count.div_ceil(gx);
    let cell_w = domain.bounds.width() / gx as f64;
    let cell_h = domain.bounds.height() / gy as f64;
    let mut rng = derive_rng(cfg.scene.seed, "cameras", 0);
    let mut out = Vec::with_capacity(count as usize);
    for id in 0..count {
        let ix = id % gx;
        let iy = id / gx;
        let mut cx = domain.bounds.min[0] + (ix as f64 + 0.5) * cell_w;
        let mut cy = domain.bounds.min[1] + (iy as f64 + 0.5) * cell_h;
        // Zoom is drawn unconditionally to keep the stream layout-independent.
        let jx: f64 = rng.random_range(-1.0..1.0);
        let jy: f64 = rng.random_range(-1.0..1.0);
        let zoom = rng.random_range(cfg.cameras.zoom_min..=cfg.cameras.zoom_max);
        if cfg.cameras.layout == CameraLayout::JitteredGrid {
            cx += jx * cfg.cameras.jitter * cell_w;
            cy += jy * cfg.cameras.jitter * cell_h;
        }
        let cam = Camera {
            id,
            center: [cx, cy],
            half_extent: zoom,
            width: cfg.cameras.resolution[0],
            height: cfg.cameras.resolution[1],
        };
        cam.validate(domain)?;
        out.push(cam);
    }
    Ok(out)
}

/// Place anchors at ground-truth centers plus a uniform grid fill, duplicate
/// each into every block whose extended region contains it, and draw seeded
/// initial features and offsets per spawn id.
pub fn init_anchors(
    blocks: &mut [Block],
    gt_centers: &[[f64; 2]],
    domain: &SceneDomain,
    spacing: f64,
    k_g: u32,
    base_radius: f64,
    seed: u64,
) -> Result<()> {
    if spacing <= 0.0 || spacing.is_nan() {
        return Err(Error::validation(format!(
            "anchor spacing {spacing} must be positive"
        )));
    }
    let mut positions: Vec<[f64; 2]> = gt_centers.to_vec();
    let b = domain.bounds;
    let mut y = b.min[1] + 0.5 * spacing;
    while y < b.max[1] {
        let mut x = b.min[0] + 0.5 * spacing;
        while x < b.max[0] {
            positions.push([x, y]);
            x += spacing;
        }
        y += spacing;
    }

    for (id, pos) in positions.iter().enumerate() {
        let mut rng = derive_rng(seed, "anchor", id as u64);
        let normal = rand_distr::Normal::new(0.0, 0.1).expect("anchor feature distribution");
        let feature: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.sample(normal)).collect();
        let offsets: Vec<f64> = (0..k_g as usize * 2)
            .map(|_| rng.random_range(-0.5..0.5))
            .collect();
        let anchor = Anchor {
            id: id as u64,
            position: *pos,
            base_radius,
            feature: Tensor::new(vec![FEATURE_DIM], feature)?,
            offsets: Tensor::new(vec![k_g as usize, 2], offsets)?,
        };
        for block in blocks.iter_mut() {
            if block.extended.contains_closed(*pos) {
                block.anchors.push(anchor.clone());
            }
        }
    }
    for block in blocks.iter() {
        if block.anchors.is_empty() {
            return Err(Error::partition(format!(
                "block {} has no anchors; spacing {spacing} is too coarse",
                block.id
            )));
        }
    }
    Ok(())
}

/// Cameras, ground-truth images, and the per-block training-view assignment.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub cameras: Vec<Camera>,
    pub gt_images: Vec<Image>,
    /// Train camera ids assigned to each block.
    pub block_views: Vec<Vec<u32>>,
    pub train_ids: Vec<u32>,
    pub holdout_ids: Vec<u32>,
}

impl Dataset {
    pub fn gt_for(&self, camera_id: u32) -> &Image {
        &self.gt_images[camera_id as usize]
    }
}

/// A fully assembled world, ready for training.
#[derive(Debug, Clone)]
pub struct World {
    pub domain: SceneDomain,
    pub gaussians: Vec<GroundTruthGaussian>,
    pub blocks: Vec<Block>,
    pub dataset: Dataset,
}

/// Build the world from config alone (generation path).
pub fn build_world(cfg: &RunConfig) -> Result<World> {
    cfg.validate()?;
    let domain = SceneDomain::new(crate::geom::Rect::new(
        cfg.scene.domain_min,
        cfg.scene.domain_max,
    ))?;
    let gaussians = generate_synthetic_scene(cfg.scene.seed, cfg.scene.n_gt, &domain)?;
    let cameras = make_cameras(cfg, &domain)?;
    assemble_world(cfg, domain, gaussians, cameras)
}

/// Build the world from already-loaded scene data (dataset path).
pub fn assemble_world(
    cfg: &RunConfig,
    domain: SceneDomain,
    gaussians: Vec<GroundTruthGaussian>,
    cameras: Vec<Camera>,
) -> Result<World> {
    let mut blocks = partition(
        &domain,
        cfg.partition.nx,
        cfg.partition.ny,
        cfg.partition.overlap_ratio,
    )?;
    let gt_centers: Vec<[f64; 2]> = if cfg.anchors.include_gt_centers {
        gaussians.iter().map(|g| g.center).collect()
    } else {
        Vec::new()
    };
    init_anchors(
        &mut blocks,
        &gt_centers,
        &domain,
        cfg.anchors.spacing,
        cfg.anchors.k_g,
        cfg.anchors.base_radius,
        cfg.scene.seed,
    )?;

    let gt_images: Vec<Image> = cameras
        .iter()
        .map(|c| render_ground_truth(&gaussians, c))
        .collect::<Result<_>>()?;

    let mut train_ids = Vec::new();
    let mut holdout_ids = Vec::new();
    for cam in &cameras {
        if cam.id % cfg.cameras.holdout_every == 0 {
            holdout_ids.push(cam.id);
        } else {
            train_ids.push(cam.id);
        }
    }
    let train_cams: Vec<Camera> = train_ids.iter().map(|&id| cameras[id as usize]).collect();
    let block_views = assign_views(&train_cams, &blocks)?;
    for (b, views) in blocks.iter().zip(&block_views) {
        if views.is_empty() {
            return Err(Error::validation(format!(
                "block {} has no assigned training views; add cameras or widen zoom",
                b.id
            )));
        }
    }
    Ok(World {
        domain,
        gaussians,
        blocks,
        dataset: Dataset {
            cameras,
            gt_images,
            block_views,
            train_ids,
            holdout_ids,
        },
    })
}

/// Versioned scene file: everything needed to regenerate the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub version: u32,
    pub seed: u64,
    pub domain: SceneDomain,
    pub partition: crate::config::PartitionCfg,
    pub gaussians: Vec<GroundTruthGaussian>,
    pub cameras: Vec<Camera>,
}

pub const SCENE_FILE_VERSION: u32 = 1;

impl SceneFile {
    pub fn from_world(cfg: &RunConfig, world: &World) -> Self {
        SceneFile {
            version: SCENE_FILE_VERSION,
            seed: cfg.scene.seed,
            domain: world.domain,
            partition: cfg.partition.clone(),
            gaussians: world.gaussians.clone(),
            cameras: world.dataset.cameras.clone(),
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let f: SceneFile =
            serde_json::from_str(s).map_err(|e| Error::format(format!("scene file: {e}")))?;
        if f.version != SCENE_FILE_VERSION {
            return Err(Error::format(format!(
                "scene file version {} unsupported (expected {SCENE_FILE_VERSION})",
                f.version
            )));
        }
        for g in &f.gaussians {
            g.validate()?;
        }
        let domain = SceneDomain::new(f.domain.bounds)?;
        for c in &f.cameras {
            c.validate(&domain)?;
        }
        Ok(f)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene file serializes")
    }
}
