//! Finite-difference verification suite covering every differentiable stage,
//! culminating in the end-to-end pipeline check (decode, composite, image
//! loss) on a small fixture.

use crate::autodiff::{grad_check, GradCheckReport, Tensor};
use crate::decoder::{decode_on_tape, DecoderParams, DecoderSlots, INPUT_DIM};
use crate::error::Result;
use crate::geom::{derive_rng, Camera, SceneDomain};
use crate::metrics::{l1_loss_on_tape, ssim_loss_on_tape};
use crate::render::{composite_on_tape, RenderSettings, SortKey};
use crate::scene::{generate_synthetic_scene, render_ground_truth, FEATURE_DIM};
use rand::Rng;

/// One named check in the suite.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub pass: bool,
}

/// Fixture for the end-to-end check: 4 anchors, k_g = 2, 16x16 view.
pub struct PipelineFixture {
    pub params: Vec<Tensor>,
    pub positions: Vec<[f64; 2]>,
    pub camera: Camera,
    pub gt: crate::render::Image,
    pub k_g: u32,
    pub base_radius: f64,
    pub lambda_ssim: f64,
}

pub fn pipeline_fixture(seed: u64) -> Result<PipelineFixture> {
    let domain = SceneDomain::default();
    let camera = Camera {
        id: 0,
        center: [0.5, 0.5],
        half_extent: 0.45,
        width: 16,
        height: 16,
    };
    let scene = generate_synthetic_scene(seed, 4, &domain)?;
    let gt = render_ground_truth(&scene, &camera)?;
    let k_g = 2u32;
    let base_radius = 0.12;
    let decoder = DecoderParams::init_seeded(k_g, seed);
    let mut rng = derive_rng(seed, "pipeline-fixture", 0);
    let positions: Vec<[f64; 2]> = (0..4)
        .map(|_| [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)])
        .collect();
    let mut params = decoder.tensors_vec();
    for _ in 0..4 {
        let feat: Vec<f64> = (0..FEATURE_DIM)
            .map(|_| rng.random_range(-0.3..0.3))
            .collect();
        params.push(Tensor::new(vec![FEATURE_DIM], feat)?);
        let off: Vec<f64> = (0..k_g as usize * 2)
            .map(|_| rng.random_range(-0.5..0.5))
            .collect();
        params.push(Tensor::new(vec![k_g as usize, 2], off)?);
    }
    Ok(PipelineFixture {
        params,
        positions,
        camera,
        gt,
        k_g,
        base_radius,
        lambda_ssim: 0.2,
    })
}

/// Central-difference check of the full pipeline loss against every decoder
/// and anchor parameter. Uses the reference (unbounded) rasterizer path.
pub fn pipeline_gradcheck(seed: u64, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let fx = pipeline_fixture(seed)?;
    let positions = fx.positions.clone();
    let camera = fx.camera;
    let gt = fx.gt.clone();
    let k_g = fx.k_g;
    let base_radius = fx.base_radius;
    let lambda_ssim = fx.lambda_ssim;
    let diag = SceneDomain::default().diagonal();

    grad_check(
        move |tape, ids| {
            let slots = DecoderSlots {
                w1: ids[0],
                b1: ids[1],
                w2: ids[2],
                b2: ids[3],
            };
            let n = positions.len();
            let mut feat_rows = Vec::with_capacity(n);
            let mut off_ids = Vec::with_capacity(n);
            for i in 0..n {
                let row = tape.reshape(ids[4 + i * 2], vec![1, FEATURE_DIM])?;
                feat_rows.push(row);
                off_ids.push(ids[4 + i * 2 + 1]);
            }
            let feats = tape.concat(&feat_rows, 0)?;
            let mut geom = Vec::with_capacity(n * 3);
            for p in &positions {
                geom.extend_from_slice(&crate::decoder::viewing_geometry(*p, &camera, diag));
            }
            let geom_id = tape.constant(Tensor::new(vec![n, 3], geom)?);
            let input = tape.concat(&[feats, geom_id], 1)?;
            let decoded = decode_on_tape(tape, &slots, input, k_g, base_radius)?;

            let offsets_cat = tape.concat(&off_ids, 0)?;
            let scaled = tape.scale(offsets_cat, base_radius)?;
            let mut pos_tiled = Vec::with_capacity(n * k_g as usize * 2);
            for p in &positions {
                for _ in 0..k_g {
                    pos_tiled.extend_from_slice(p);
                }
            }
            let pos_id = tape.constant(Tensor::new(vec![n * k_g as usize, 2], pos_tiled)?);
            let centers = tape.add(scaled, pos_id)?;
            let mut keys = Vec::with_capacity(n * k_g as usize);
            for (i, _) in positions.iter().enumerate() {
                for j in 0..k_g {
                    keys.push(SortKey {
                        block: 0,
                        anchor: i as u64,
                        slot: j,
                    });
                }
            }
            let image = composite_on_tape(
                tape,
                centers,
                decoded.rotation,
                decoded.scale,
                decoded.color,
                decoded.opacity,
                keys,
                camera,
                RenderSettings::reference(),
            )?;
            let l1 = l1_loss_on_tape(tape, image, &gt)?;
            let sl = ssim_loss_on_tape(tape, image, &gt)?;
            let sls = tape.scale(sl, lambda_ssim)?;
            tape.add(l1, sls)
        },
        &fx.params,
        eps,
        tol,
    )
}

/// The standard verification suite.
pub fn run_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();

    // Primitive chain: matmul, relu, sigmoid, square, mean.
    let mut rng = derive_rng(seed, "suite-prims", 0);
    let w1 = Tensor::new(
        vec![3, 5],
        (0..15).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let w2 = Tensor::new(
        vec![5, 1],
        (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let x = Tensor::new(
        vec![1, 3],
        (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let prim = grad_check(
        move |tape, ids| {
            let xv = tape.constant(x.clone());
            let h = tape.matmul(xv, ids[0])?;
            let a = tape.relu(h)?;
            let s = tape.sigmoid(a)?;
            let o = tape.matmul(s, ids[1])?;
            let sq = tape.square(o)?;
            tape.mean(sq)
        },
        &[w1, w2],
        1e-5,
        1e-6,
    )?;
    out.push(CheckOutcome {
        name: "primitives",
        pass: prim.pass,
        report: prim,
    });

    // Decoder alone.
    let decoder = DecoderParams::init_seeded(2, seed);
    let mut rng = derive_rng(seed, "suite-decode", 0);
    let mut row: Vec<f64> = (0..FEATURE_DIM)
        .map(|_| rng.random_range(-0.3..0.3))
        .collect();
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    row.push(rng.random_range(0.0..1.0));
    row.push(theta.cos());
    row.push(theta.sin());
    let input = Tensor::new(vec![1, INPUT_DIM], row)?;
    let dec = grad_check(
        move |tape, ids| {
            let slots = DecoderSlots {
                w1: ids[0],
                b1: ids[1],
                w2: ids[2],
                b2: ids[3],
            };
            let x = tape.constant(input.clone());
            let d = decode_on_tape(tape, &slots, x, 2, 0.1)?;
            let sq = tape.square(d.color)?;
            let m1 = tape.mean(sq)?;
            let sc = tape.square(d.scale)?;
            let m2 = tape.mean(sc)?;
            tape.add(m1, m2)
        },
        &decoder.tensors_vec(),
        1e-5,
        1e-5,
    )?;
    out.push(CheckOutcome {
        name: "decoder",
        pass: dec.pass,
        report: dec,
    });

    // Full pipeline at the acceptance thresholds.
    let pipe = pipeline_gradcheck(seed, 1e-5, 1e-4)?;
    let pass = pipe.fraction_within_tol() >= 0.99 && pipe.max_rel_err <= 1e-3;
    out.push(CheckOutcome {
        name: "pipeline",
        pass,
        report: pipe,
    });

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let outcomes = run_suite(13).unwrap();
        for o in &outcomes {
            assert!(
                o.pass,
                "{} failed: max rel err {} ({} / {} within tol)",
                o.name, o.report.max_rel_err, o.report.within_tol, o.report.coords_checked
            );
        }
    }
}
