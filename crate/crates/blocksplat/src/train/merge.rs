//! Block merge (core-region anchor ownership), merged rendering, evaluation,
//! and the boundary seam statistic.

use crate::decoder::{decode_batch, decoder_inputs, frustum_filter, DecoderParams};
use crate::error::{Error, Result};
use crate::geom::{Camera, SceneDomain};
use crate::metrics::{l1_loss, psnr, ssim, MetricReport};
use crate::render::{composite, Image, RenderSettings, SortKey, Splat};
use crate::scene::{core_owns, Anchor, World};
use crate::train::{BlockState, FRUSTUM_MARGIN};
use std::collections::BTreeMap;

/// One anchor kept by the merge, tagged with its owning block and decoder.
#[derive(Debug, Clone)]
pub struct MergedAnchor {
    pub anchor: Anchor,
    pub block_id: u32,
    pub decoder_idx: usize,
}

/// The merged scene: deduplicated anchors plus the decoder table (a single
/// shared decoder, or one per block after independent training).
#[derive(Debug, Clone)]
pub struct MergedModel {
    pub decoders: Vec<DecoderParams>,
    pub anchors: Vec<MergedAnchor>,
}

/// Keep each anchor iff its position lies in the owning block's core
/// (lower-inclusive half-open boundaries). Anchor copies in overlap strips
/// collapse to the single core owner; double ownership is a partition error.
pub fn merge(
    blocks: &[BlockState],
    domain: &SceneDomain,
    decoders: &[DecoderParams],
) -> Result<MergedModel> {
    let mut owner_of: BTreeMap<u64, u32> = BTreeMap::new();
    let mut anchors = Vec::new();
    for (bi, state) in blocks.iter().enumerate() {
        for anchor in &state.block.anchors {
            if core_owns(&state.block, domain, anchor.position) {
                if let Some(prev) = owner_of.insert(anchor.id, state.block.id) {
                    return Err(Error::partition(format!(
                        "anchor {} core-owned by both block {prev} and block {}",
                        anchor.id, state.block.id
                    )));
                }
                anchors.push(MergedAnchor {
                    anchor: anchor.clone(),
                    block_id: state.block.id,
                    decoder_idx: if decoders.len() == 1 { 0 } else { bi },
                });
            }
        }
    }
    if anchors.is_empty() {
        return Err(Error::partition("merge kept no anchors"));
    }
    Ok(MergedModel {
        decoders: decoders.to_vec(),
        anchors,
    })
}

fn splats_for_anchors(
    anchors: &[(&Anchor, u32, usize)],
    decoders: &[DecoderParams],
    camera: &Camera,
    domain_diagonal: f64,
) -> Result<Vec<Splat>> {
    if anchors.is_empty() {
        return Ok(Vec::new());
    }
    // Batch-decode per decoder index, then reassemble in anchor order.
    let mut per_decoder: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, (_, _, di)) in anchors.iter().enumerate() {
        per_decoder.entry(*di).or_default().push(i);
    }
    let k_g = decoders[0].k_g as usize;
    let mut slot_attrs: Vec<Option<[Vec<f64>; 4]>> = vec![None; anchors.len()];
    for (di, idxs) in per_decoder {
        let group: Vec<&Anchor> = idxs.iter().map(|&i| anchors[i].0).collect();
        let inputs = decoder_inputs(&group, camera, domain_diagonal);
        let base_radius = group[0].base_radius;
        let batch = decode_batch(&decoders[di], &inputs, base_radius)?;
        for (gi, &ai) in idxs.iter().enumerate() {
            let s = gi * k_g;
            slot_attrs[ai] = Some([
                batch.color.data()[s * 3..(s + k_g) * 3].to_vec(),
                batch.opacity.data()[s..s + k_g].to_vec(),
                batch.rotation.data()[s..s + k_g].to_vec(),
                batch.scale.data()[s * 2..(s + k_g) * 2].to_vec(),
            ]);
        }
    }
    let mut splats = Vec::with_capacity(anchors.len() * k_g);
    for (i, (anchor, block_id, _)) in anchors.iter().enumerate() {
        let attrs = slot_attrs[i].as_ref().expect("decoded every anchor");
        let [color, opacity, rotation, scale] = attrs;
        for j in 0..k_g {
            splats.push(Splat {
                key: SortKey {
                    block: *block_id,
                    anchor: anchor.id,
                    slot: j as u32,
                },
                center: [
                    anchor.position[0] + anchor.offsets.data()[j * 2] * anchor.base_radius,
                    anchor.position[1] + anchor.offsets.data()[j * 2 + 1] * anchor.base_radius,
                ],
                rotation: rotation[j],
                scale: [scale[j * 2], scale[j * 2 + 1]],
                color: [color[j * 3], color[j * 3 + 1], color[j * 3 + 2]],
                opacity: opacity[j],
            });
        }
    }
    Ok(splats)
}

/// Render the merged model for one camera.
pub fn render_merged(
    model: &MergedModel,
    camera: &Camera,
    domain: &SceneDomain,
    settings: &RenderSettings,
) -> Result<Image> {
    let m = FRUSTUM_MARGIN * camera.half_extent;
    let vp = camera.viewport();
    let inflated = crate::geom::Rect::new(
        [vp.min[0] - m, vp.min[1] - m],
        [vp.max[0] + m, vp.max[1] + m],
    );
    let visible: Vec<(&Anchor, u32, usize)> = model
        .anchors
        .iter()
        .filter(|ma| inflated.contains_closed(ma.anchor.position))
        .map(|ma| (&ma.anchor, ma.block_id, ma.decoder_idx))
        .collect();
    let splats = splats_for_anchors(&visible, &model.decoders, camera, domain.diagonal())?;
    composite(&splats, camera, settings)
}

/// Render one block alone (its full anchor list, frustum filtered).
pub fn render_block(
    state: &BlockState,
    decoder: &DecoderParams,
    camera: &Camera,
    domain: &SceneDomain,
    settings: &RenderSettings,
) -> Result<Image> {
    let visible = frustum_filter(&state.block.anchors, camera, FRUSTUM_MARGIN);
    let anchors: Vec<(&Anchor, u32, usize)> = visible
        .iter()
        .map(|&i| (&state.block.anchors[i], state.block.id, 0usize))
        .collect();
    let splats = splats_for_anchors(
        &anchors,
        std::slice::from_ref(decoder),
        camera,
        domain.diagonal(),
    )?;
    composite(&splats, camera, settings)
}

/// Mean metrics of rendered images against ground truth.
pub fn evaluate_images(
    renders: &[Image],
    gts: &[Image],
) -> Result<(Vec<MetricReport>, MetricReport)> {
    if renders.len() != gts.len() || renders.is_empty() {
        return Err(Error::contract(
            "evaluate needs equally many renders and ground truths",
        ));
    }
    let mut reports = Vec::with_capacity(renders.len());
    for (r, g) in renders.iter().zip(gts) {
        reports.push(MetricReport {
            psnr: psnr(r, g)?,
            ssim: ssim(r, g)?,
            l1: l1_loss(r, g)?,
        });
    }
    let n = reports.len() as f64;
    let mean = MetricReport {
        psnr: reports.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
        l1: reports.iter().map(|r| r.l1).sum::<f64>() / n,
    };
    Ok((reports, mean))
}

/// Render the merged model over a camera set and compare with ground truth.
pub fn evaluate_merged(
    model: &MergedModel,
    world: &World,
    camera_ids: &[u32],
) -> Result<(Vec<MetricReport>, MetricReport)> {
    let mut renders = Vec::with_capacity(camera_ids.len());
    let mut gts = Vec::with_capacity(camera_ids.len());
    for &id in camera_ids {
        let cam = &world.dataset.cameras[id as usize];
        renders.push(render_merged(
            model,
            cam,
            &world.domain,
            &RenderSettings::default(),
        )?);
        gts.push(world.dataset.gt_for(id).clone());
    }
    evaluate_images(&renders, &gts)
}

/// Mean adjacent-column (or row) discrepancy across each internal block
/// boundary, minus the same statistic on the ground truth; averaged over
/// probe cameras. Positive values mean the model has seams the scene lacks.
pub fn seam_statistic(model: &MergedModel, world: &World, nx: u32, ny: u32) -> Result<f64> {
    let b = world.domain.bounds;
    let res = 64u32;
    let cell_w = b.width() / nx as f64;
    let cell_h = b.height() / ny as f64;
    let half = 0.5 * cell_w.min(cell_h);
    let mut probes: Vec<(Camera, bool)> = Vec::new();
    // Vertical boundaries: one probe per row cell.
    for i in 1..nx {
        let x = b.min[0] + b.width() * (i as f64 / nx as f64);
        for j in 0..ny {
            let y = b.min[1] + (j as f64 + 0.5) * cell_h;
            probes.push((
                Camera {
                    id: 0,
                    center: [x, y],
                    half_extent: half,
                    width: res,
                    height: res,
                },
                true,
            ));
        }
    }
    // Horizontal boundaries: one probe per column cell.
    for j in 1..ny {
        let y = b.min[1] + b.height() * (j as f64 / ny as f64);
        for i in 0..nx {
            let x = b.min[0] + (i as f64 + 0.5) * cell_w;
            probes.push((
                Camera {
                    id: 0,
                    center: [x, y],
                    half_extent: half,
                    width: res,
                    height: res,
                },
                false,
            ));
        }
    }
    if probes.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (cam, vertical) in &probes {
        let render = render_merged(model, cam, &world.domain, &RenderSettings::default())?;
        let gt = crate::scene::render_ground_truth(&world.gaussians, cam)?;
        acc += boundary_discrepancy(&render, *vertical) - boundary_discrepancy(&gt, *vertical);
    }
    Ok(acc / probes.len() as f64)
}

/// Mean |left - right| over the two center columns (or rows) of an image.
fn boundary_discrepancy(img: &Image, vertical: bool) -> f64 {
    let (w, h) = (img.width, img.height);
    let mut acc = 0.0;
    let mut n = 0usize;
    if vertical {
        let c = w / 2;
        for y in 0..h {
            let a = img.pixel(c - 1, y);
            let b = img.pixel(c, y);
            for ch in 0..3 {
                acc += (a[ch] - b[ch]).abs();
                n += 1;
            }
        }
    } else {
        let r = h / 2;
        for x in 0..w {
            let a = img.pixel(x, r - 1);
            let b = img.pixel(x, r);
            for ch in 0..3 {
                acc += (a[ch] - b[ch]).abs();
                n += 1;
            }
        }
    }
    acc / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::scene::build_world;
    use crate::train::Trainer;

    fn cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.scene.n_gt = 6;
        cfg.cameras.count = 12;
        cfg.cameras.resolution = [24, 24];
        cfg.cameras.zoom_min = 0.2;
        cfg.cameras.zoom_max = 0.35;
        cfg.partition.nx = 2;
        cfg.partition.ny = 1;
        cfg.anchors.spacing = 0.2;
        cfg.anchors.k_g = 2;
        cfg.train.workers = 2;
        cfg.train.period = 2;
        cfg
    }

    #[test]
    fn single_block_merge_is_identity() {
        let mut c = cfg();
        c.partition = crate::config::PartitionCfg {
            nx: 1,
            ny: 1,
            overlap_ratio: 0.1,
        };
        c.train.workers = 1;
        let world = build_world(&c).unwrap();
        let n_anchors = world.blocks[0].anchors.len();
        let tr = Trainer::new(c, world).unwrap();
        let merged = tr.merged().unwrap();
        assert_eq!(merged.anchors.len(), n_anchors);
        assert_eq!(merged.decoders.len(), 1);
    }

    #[test]
    fn overlap_copies_collapse_to_core_owner() {
        let c = cfg();
        let world = build_world(&c).unwrap();
        let total_with_dups: usize = world.blocks.iter().map(|b| b.anchors.len()).sum();
        let distinct: std::collections::BTreeSet<u64> = world
            .blocks
            .iter()
            .flat_map(|b| b.anchors.iter().map(|a| a.id))
            .collect();
        assert!(
            total_with_dups > distinct.len(),
            "overlap must duplicate some anchors"
        );
        let tr = Trainer::new(c, world).unwrap();
        let merged = tr.merged().unwrap();
        assert_eq!(merged.anchors.len(), distinct.len());
        // Each kept anchor's position is inside its owner's core.
        for ma in &merged.anchors {
            let state = tr
                .block_states
                .iter()
                .find(|s| s.block.id == ma.block_id)
                .unwrap();
            assert!(crate::scene::core_owns(
                &state.block,
                &tr.world.domain,
                ma.anchor.position
            ));
        }
    }

    #[test]
    fn duplicate_core_ownership_detected() {
        let c = cfg();
        let world = build_world(&c).unwrap();
        let mut tr = Trainer::new(c, world).unwrap();
        // Corrupt the partition: stretch block 0's core over the whole domain.
        tr.block_states[0].block.core = tr.world.domain.bounds;
        let res = tr.merged();
        assert!(matches!(res, Err(Error::Partition(_))));
    }

    #[test]
    fn merged_render_equals_block_render_when_only_its_anchors_visible() {
        let c = cfg();
        let world = build_world(&c).unwrap();
        let mut tr = Trainer::new(c, world).unwrap();
        for _ in 0..4 {
            tr.step().unwrap();
        }
        let merged = tr.merged().unwrap();
        // Probe strictly inside block 0's core, far from the overlap strip:
        // core is [0, 0.5] x [0, 1], extension reaches 0.05 past 0.5, frustum
        // margin is 0.25 * h. Choose h and center so the inflated viewport
        // stays left of the overlap while seeing only core-owned anchors.
        let camera = Camera {
            id: 0,
            center: [0.2, 0.5],
            half_extent: 0.15,
            width: 24,
            height: 24,
        };
        let a = render_merged(
            &merged,
            &camera,
            &tr.world.domain,
            &RenderSettings::default(),
        )
        .unwrap();
        let b = render_block(
            &tr.block_states[0],
            &tr.students[0],
            &camera,
            &tr.world.domain,
            &RenderSettings::default(),
        )
        .unwrap();
        assert_eq!(a.max_abs_diff(&b), 0.0, "renders must agree bitwise");
    }

    #[test]
    fn evaluate_gt_against_itself_is_perfect() {
        let c = cfg();
        let world = build_world(&c).unwrap();
        let ids: Vec<u32> = world.dataset.holdout_ids.clone();
        let renders: Vec<Image> = ids
            .iter()
            .map(|&id| {
                crate::scene::render_ground_truth(
                    &world.gaussians,
                    &world.dataset.cameras[id as usize],
                )
                .unwrap()
            })
            .collect();
        let gts: Vec<Image> = ids
            .iter()
            .map(|&id| world.dataset.gt_for(id).clone())
            .collect();
        let (_, mean) = evaluate_images(&renders, &gts).unwrap();
        assert_eq!(mean.psnr, 60.0);
        assert_eq!(mean.ssim, 1.0);
        assert_eq!(mean.l1, 0.0);
    }

    #[test]
    fn seam_statistic_zero_for_ground_truth_model() {
        // A probe rendering the GT itself cancels exactly.
        let c = cfg();
        let world = build_world(&c).unwrap();
        let tr = Trainer::new(c.clone(), world).unwrap();
        let merged = tr.merged().unwrap();
        let s = seam_statistic(&merged, &tr.world, c.partition.nx, c.partition.ny).unwrap();
        assert!(s.is_finite());
    }
}
