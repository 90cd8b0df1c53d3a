//! Front-to-back alpha compositing and its analytic backward pass.
//!
//! The forward loop walks splats in sort order, updating per-pixel
//! transmittance. The backward pass walks them in reverse, reconstructing the
//! transmittance each splat saw and distributing the image gradient onto
//! center, rotation, scale, color, and opacity.

use crate::autodiff::{Tape, Tensor, ValueId};
use crate::error::{Error, Result};
use crate::geom::Camera;
use crate::render::{
    pixel_scale, project_point, world_covariance, Image, RenderSettings, SortKey, Splat,
};

/// Sigma is capped a hair below 1 so the backward transmittance
/// reconstruction 1/(1 - sigma) stays finite when a sigmoid saturates.
const MAX_SIGMA: f64 = 1.0 - 1e-9;

/// Forward-pass state needed by the backward pass.
#[derive(Debug, Clone)]
pub struct CompositeAux {
    /// Transmittance left at each pixel after the forward pass.
    t_final: Vec<f64>,
    /// First splat index at which a pixel was observed saturated (u32::MAX if never).
    cutoff: Vec<u32>,
}

/// Gradients of a scalar loss w.r.t. one splat's attributes.
#[derive(Debug, Clone, Copy, Default)]
pub struct SplatGrad {
    pub center: [f64; 2],
    pub rotation: f64,
    pub scale: [f64; 2],
    pub color: [f64; 3],
    pub opacity: f64,
}

struct Prepared {
    mean_px: [f64; 2],
    /// Inverse pixel-space covariance (xx, xy, yy).
    inv: [f64; 3],
    color: [f64; 3],
    opacity: f64,
    /// Inclusive pixel ranges; x0 > x1 means the splat touches nothing.
    x0: i64,
    x1: i64,
    y0: i64,
    y1: i64,
}

fn check_sorted(splats: &[Splat]) -> Result<()> {
    for w in splats.windows(2) {
        if w[0].key >= w[1].key {
            return Err(Error::contract(format!(
                "splats must be strictly sorted by (block, anchor, slot); {:?} then {:?}",
                w[0].key, w[1].key
            )));
        }
    }
    Ok(())
}

fn prepare(splats: &[Splat], camera: &Camera, settings: &RenderSettings) -> Result<Vec<Prepared>> {
    let [sx, sy] = pixel_scale(camera);
    let w = camera.width as i64;
    let h = camera.height as i64;
    // Level set where an opacity-1 splat falls below tau; outside it every
    // sigma is below tau, so the reference path skips those pixels anyway.
    let q_max = 2.0 * (1.0 / settings.tau_opacity).ln() * (1.0 + 1e-12);
    let mut out = Vec::with_capacity(splats.len());
    for s in splats {
        if s.scale[0] <= 1e-12 || s.scale[1] <= 1e-12 {
            return Err(Error::numerics(format!(
                "splat {:?} scale {:?} at or below 1e-12",
                s.key, s.scale
            )));
        }
        let cw = world_covariance(s.rotation, s.scale);
        let cov_px = [cw[0] * sx * sx, cw[1] * sx * sy, cw[2] * sy * sy];
        let det = cov_px[0] * cov_px[2] - cov_px[1] * cov_px[1];
        if det <= 0.0 || !det.is_finite() {
            return Err(Error::numerics(format!(
                "degenerate splat covariance, det {det}"
            )));
        }
        let inv = [cov_px[2] / det, -cov_px[1] / det, cov_px[0] / det];
        let mean_px = project_point(camera, s.center);
        let (x0, x1, y0, y1) = if settings.bounded {
            let half_x = (q_max * cov_px[0]).sqrt();
            let half_y = (q_max * cov_px[2]).sqrt();
            (
                ((mean_px[0] - half_x - 0.5).ceil() as i64 - 1).max(0),
                ((mean_px[0] + half_x - 0.5).floor() as i64 + 1).min(w - 1),
                ((mean_px[1] - half_y - 0.5).ceil() as i64 - 1).max(0),
                ((mean_px[1] + half_y - 0.5).floor() as i64 + 1).min(h - 1),
            )
        } else {
            (0, w - 1, 0, h - 1)
        };
        out.push(Prepared {
            mean_px,
            inv,
            color: s.color,
            opacity: s.opacity,
            x0,
            x1,
            y0,
            y1,
        });
    }
    Ok(out)
}

#[inline]
fn gaussian_at(p: &Prepared, px: f64, py: f64) -> f64 {
    let dx = px - p.mean_px[0];
    let dy = py - p.mean_px[1];
    let q = p.inv[0] * dx * dx + 2.0 * p.inv[1] * dx * dy + p.inv[2] * dy * dy;
    (-0.5 * q).exp()
}

/// Composite sorted splats over a black background.
pub fn composite(splats: &[Splat], camera: &Camera, settings: &RenderSettings) -> Result<Image> {
    composite_with_aux(splats, camera, settings).map(|(img, _)| img)
}

/// Composite and keep the state the backward pass needs.
pub fn composite_with_aux(
    splats: &[Splat],
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<(Image, CompositeAux)> {
    check_sorted(splats)?;
    let prepared = prepare(splats, camera, settings)?;
    let w = camera.width as usize;
    let h = camera.height as usize;
    let mut img = vec![0.0f64; w * h * 3];
    let mut trans = vec![1.0f64; w * h];
    let mut cutoff = vec![u32::MAX; w * h];

    for (si, p) in prepared.iter().enumerate() {
        for py in p.y0..=p.y1 {
            for px in p.x0..=p.x1 {
                let idx = py as usize * w + px as usize;
                if cutoff[idx] != u32::MAX {
                    continue;
                }
                let t = trans[idx];
                if t < settings.eps_transmittance {
                    cutoff[idx] = si as u32;
                    continue;
                }
                let g = gaussian_at(p, px as f64 + 0.5, py as f64 + 0.5);
                let sigma = (p.opacity * g).min(MAX_SIGMA);
                if sigma < settings.tau_opacity {
                    continue;
                }
                let w_contrib = sigma * t;
                let base = idx * 3;
                img[base] += p.color[0] * w_contrib;
                img[base + 1] += p.color[1] * w_contrib;
                img[base + 2] += p.color[2] * w_contrib;
                trans[idx] = t * (1.0 - sigma);
            }
        }
    }
    let image = Image::new(camera.width, camera.height, img)?;
    Ok((
        image,
        CompositeAux {
            t_final: trans,
            cutoff,
        },
    ))
}

/// Analytic gradients of the composite w.r.t. every splat attribute.
///
/// Terms skipped in the forward pass (sigma below tau, post-saturation)
/// receive exact zeros.
pub fn composite_backward(
    splats: &[Splat],
    camera: &Camera,
    settings: &RenderSettings,
    aux: &CompositeAux,
    image_grad: &Tensor,
) -> Result<Vec<SplatGrad>> {
    let w = camera.width as usize;
    let h = camera.height as usize;
    if image_grad.shape() != [h, w, 3] {
        return Err(Error::shape(format!(
            "image gradient shape {:?} vs [{h}, {w}, 3]",
            image_grad.shape()
        )));
    }
    let prepared = prepare(splats, camera, settings)?;
    let [sx, sy] = pixel_scale(camera);
    let up = image_grad.data();
    let mut t_cur = aux.t_final.clone();
    // Suffix sums over processed splats behind the current one: c_k sigma_k T_k.
    let mut behind = vec![0.0f64; w * h * 3];
    let mut grads = vec![SplatGrad::default(); splats.len()];

    for si in (0..prepared.len()).rev() {
        let p = &prepared[si];
        let splat = &splats[si];
        let g_out = &mut grads[si];
        // Accumulated in pixel space; chained to world parameters once per splat.
        let mut g_mean_px = [0.0f64; 2];
        let mut g_cov_px = [0.0f64; 3];
        for py in p.y0..=p.y1 {
            for px in p.x0..=p.x1 {
                let idx = py as usize * w + px as usize;
                if si as u32 >= aux.cutoff[idx] {
                    continue;
                }
                let fx = px as f64 + 0.5;
                let fy = py as f64 + 0.5;
                let g = gaussian_at(p, fx, fy);
                let sigma = (p.opacity * g).min(MAX_SIGMA);
                if sigma < settings.tau_opacity {
                    continue;
                }
                let one_minus = 1.0 - sigma;
                let t_before = t_cur[idx] / one_minus;
                let base = idx * 3;
                let upc = [up[base], up[base + 1], up[base + 2]];

                let mut d_sigma = 0.0;
                for c in 0..3 {
                    g_out.color[c] += sigma * t_before * upc[c];
                    d_sigma += upc[c] * (p.color[c] * t_before - behind[base + c] / one_minus);
                }
                g_out.opacity += d_sigma * g;
                let d_g = d_sigma * p.opacity;
                let d_q = -0.5 * g * d_g;

                let dx = fx - p.mean_px[0];
                let dy = fy - p.mean_px[1];
                let mx = p.inv[0] * dx + p.inv[1] * dy;
                let my = p.inv[1] * dx + p.inv[2] * dy;
                // q = d^T M d: dq/dd = 2 M d; d = pixel - mean.
                g_mean_px[0] -= d_q * 2.0 * mx;
                g_mean_px[1] -= d_q * 2.0 * my;
                // dL/dSigma_px = -d_q (M d)(M d)^T.
                g_cov_px[0] -= d_q * mx * mx;
                g_cov_px[1] -= d_q * mx * my;
                g_cov_px[2] -= d_q * my * my;

                t_cur[idx] = t_before;
                for c in 0..3 {
                    behind[base + c] += p.color[c] * sigma * t_before;
                }
            }
        }
        // Pixel-space mean to world center.
        g_out.center[0] = g_mean_px[0] * sx;
        g_out.center[1] = g_mean_px[1] * sy;
        // Pixel covariance to world covariance (diagonal scaling).
        let gw = [
            g_cov_px[0] * sx * sx,
            g_cov_px[1] * sx * sy,
            g_cov_px[2] * sy * sy,
        ];
        // World covariance to rotation and scales.
        let (sin_t, cos_t) = splat.rotation.sin_cos();
        let (v1, v2) = (
            splat.scale[0] * splat.scale[0],
            splat.scale[1] * splat.scale[1],
        );
        let da_dt = 2.0 * cos_t * sin_t * (v2 - v1);
        let db_dt = (cos_t * cos_t - sin_t * sin_t) * (v1 - v2);
        let dc_dt = 2.0 * cos_t * sin_t * (v1 - v2);
        g_out.rotation = gw[0] * da_dt + 2.0 * gw[1] * db_dt + gw[2] * dc_dt;
        g_out.scale[0] = 2.0
            * splat.scale[0]
            * (gw[0] * cos_t * cos_t + 2.0 * gw[1] * cos_t * sin_t + gw[2] * sin_t * sin_t);
        g_out.scale[1] = 2.0
            * splat.scale[1]
            * (gw[0] * sin_t * sin_t - 2.0 * gw[1] * cos_t * sin_t + gw[2] * cos_t * cos_t);
    }
    Ok(grads)
}

/// Record the composite on a tape.
///
/// Inputs are 2-D tensors over N splats: centers [N,2], rotations [N,1],
/// scales [N,2], colors [N,3], opacities [N,1]. Output is the [H,W,3] image.
#[allow(clippy::too_many_arguments)]
pub fn composite_on_tape(
    tape: &mut Tape,
    centers: ValueId,
    rotations: ValueId,
    scales: ValueId,
    colors: ValueId,
    opacities: ValueId,
    keys: Vec<SortKey>,
    camera: Camera,
    settings: RenderSettings,
) -> Result<ValueId> {
    let splats = splats_from_tensors(
        tape.value(centers),
        tape.value(rotations),
        tape.value(scales),
        tape.value(colors),
        tape.value(opacities),
        &keys,
    )?;
    let (image, aux) = composite_with_aux(&splats, &camera, &settings)?;
    let output = image.to_tensor();
    let inputs = [centers, rotations, scales, colors, opacities];
    let backward = move |ins: &[&Tensor], _out: &Tensor, grad: &Tensor| -> Vec<Tensor> {
        let splats = splats_from_tensors(ins[0], ins[1], ins[2], ins[3], ins[4], &keys)
            .expect("composite backward: inputs were validated in forward");
        let sg = composite_backward(&splats, &camera, &settings, &aux, grad)
            .expect("composite backward");
        let n = splats.len();
        let mut g_center = Tensor::zeros(vec![n, 2]);
        let mut g_rot = Tensor::zeros(vec![n, 1]);
        let mut g_scale = Tensor::zeros(vec![n, 2]);
        let mut g_color = Tensor::zeros(vec![n, 3]);
        let mut g_op = Tensor::zeros(vec![n, 1]);
        for (i, g) in sg.iter().enumerate() {
            g_center.data_mut()[i * 2] = g.center[0];
            g_center.data_mut()[i * 2 + 1] = g.center[1];
            g_rot.data_mut()[i] = g.rotation;
            g_scale.data_mut()[i * 2] = g.scale[0];
            g_scale.data_mut()[i * 2 + 1] = g.scale[1];
            g_color.data_mut()[i * 3] = g.color[0];
            g_color.data_mut()[i * 3 + 1] = g.color[1];
            g_color.data_mut()[i * 3 + 2] = g.color[2];
            g_op.data_mut()[i] = g.opacity;
        }
        vec![g_center, g_rot, g_scale, g_color, g_op]
    };
    tape.custom(&inputs, output, Box::new(backward))
}

fn splats_from_tensors(
    centers: &Tensor,
    rotations: &Tensor,
    scales: &Tensor,
    colors: &Tensor,
    opacities: &Tensor,
    keys: &[SortKey],
) -> Result<Vec<Splat>> {
    let n = keys.len();
    let want = |t: &Tensor, cols: usize, name: &str| -> Result<()> {
        if t.shape() != [n, cols] {
            return Err(Error::shape(format!(
                "{name} must be [{n}, {cols}], got {:?}",
                t.shape()
            )));
        }
        Ok(())
    };
    want(centers, 2, "centers")?;
    want(rotations, 1, "rotations")?;
    want(scales, 2, "scales")?;
    want(colors, 3, "colors")?;
    want(opacities, 1, "opacities")?;
    let mut out = Vec::with_capacity(n);
    for (i, &key) in keys.iter().enumerate() {
        out.push(Splat {
            key,
            center: [centers.data()[i * 2], centers.data()[i * 2 + 1]],
            rotation: rotations.data()[i],
            scale: [scales.data()[i * 2], scales.data()[i * 2 + 1]],
            color: [
                colors.data()[i * 3],
                colors.data()[i * 3 + 1],
                colors.data()[i * 3 + 2],
            ],
            opacity: opacities.data()[i],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, grad_check};

    fn cam(n: u32) -> Camera {
        Camera {
            id: 0,
            center: [0.5, 0.5],
            half_extent: 0.5,
            width: n,
            height: n,
        }
    }

    fn key(i: u64) -> SortKey {
        SortKey {
            block: 0,
            anchor: i,
            slot: 0,
        }
    }

    #[test]
    fn empty_scene_is_black() {
        let img = composite(&[], &cam(16), &RenderSettings::default()).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_term_alpha_blend() {
        // One splat whose sigma at the center pixel is 0.5 with pure red color.
        // Pixel center (8.5 px offset from the 8.0 projected mean) introduces a
        // tiny Gaussian falloff, so place the world center exactly on a pixel
        // center instead: pixel (8, 8) center is at px (8.5, 8.5) -> world
        // coordinate 8.5/16 = 0.53125.
        let c = 0.53125;
        let splat = Splat {
            key: key(0),
            center: [c, c],
            rotation: 0.0,
            scale: [0.08, 0.08],
            color: [1.0, 0.0, 0.0],
            opacity: 0.5,
        };
        let img = composite(&[splat], &cam(16), &RenderSettings::default()).unwrap();
        let px = img.pixel(8, 8);
        assert!((px[0] - 0.5).abs() < 1e-12, "{px:?}");
        assert_eq!(px[1], 0.0);
        assert_eq!(px[2], 0.0);
    }

    #[test]
    fn two_coincident_gaussians_hand_blend() {
        // sigma1 = sigma2 = 0.5, c1 = red, c2 = green -> (0.5, 0.25, 0).
        let c = 0.53125;
        let mk = |i: u64, color: [f64; 3]| Splat {
            key: key(i),
            center: [c, c],
            rotation: 0.0,
            scale: [0.08, 0.08],
            color,
            opacity: 0.5,
        };
        let splats = vec![mk(0, [1.0, 0.0, 0.0]), mk(1, [0.0, 1.0, 0.0])];
        let img = composite(&splats, &cam(16), &RenderSettings::default()).unwrap();
        let px = img.pixel(8, 8);
        assert!((px[0] - 0.5).abs() < 1e-12);
        assert!((px[1] - 0.25).abs() < 1e-12);
        assert_eq!(px[2], 0.0);
    }

    #[test]
    fn unsorted_input_rejected() {
        let mk = |i: u64| Splat {
            key: key(i),
            center: [0.5, 0.5],
            rotation: 0.0,
            scale: [0.1, 0.1],
            color: [1.0, 1.0, 1.0],
            opacity: 0.5,
        };
        let splats = vec![mk(1), mk(0)];
        assert!(matches!(
            composite(&splats, &cam(16), &RenderSettings::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn bounded_matches_reference_bitwise() {
        let splats = demo_splats();
        let camera = cam(32);
        let fast = composite(&splats, &camera, &RenderSettings::default()).unwrap();
        let reference = composite(&splats, &camera, &RenderSettings::reference()).unwrap();
        for (a, b) in fast.data().iter().zip(reference.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn transmittance_bound_holds() {
        let splats = demo_splats();
        let img = composite(&splats, &cam(32), &RenderSettings::default()).unwrap();
        assert!(img.data().iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn zero_image_grad_gives_zero_splat_grads() {
        let splats = demo_splats();
        let camera = cam(16);
        let settings = RenderSettings::default();
        let (_, aux) = composite_with_aux(&splats, &camera, &settings).unwrap();
        let zero = Tensor::zeros(vec![16, 16, 3]);
        let grads = composite_backward(&splats, &camera, &settings, &aux, &zero).unwrap();
        for g in grads {
            assert_eq!(g.center, [0.0, 0.0]);
            assert_eq!(g.rotation, 0.0);
            assert_eq!(g.scale, [0.0, 0.0]);
            assert_eq!(g.color, [0.0, 0.0, 0.0]);
            assert_eq!(g.opacity, 0.0);
        }
    }

    #[test]
    fn color_gradient_is_sigma_times_transmittance() {
        // Single splat, loss = red channel of one pixel: dL/dc_red = sigma there.
        let c = 0.53125;
        let splat = Splat {
            key: key(0),
            center: [c, c],
            rotation: 0.0,
            scale: [0.08, 0.08],
            color: [0.3, 0.0, 0.0],
            opacity: 0.5,
        };
        let camera = cam(16);
        let settings = RenderSettings::default();
        let splats = [splat];
        let (_, aux) = composite_with_aux(&splats, &camera, &settings).unwrap();
        let mut up = Tensor::zeros(vec![16, 16, 3]);
        up.data_mut()[(8 * 16 + 8) * 3] = 1.0;
        let grads = composite_backward(&splats, &camera, &settings, &aux, &up).unwrap();
        assert!((grads[0].color[0] - 0.5).abs() < 1e-12);
    }

    fn demo_splats() -> Vec<Splat> {
        let mut out = Vec::new();
        let pts = [
            ([0.31, 0.42], 0.4, [0.06, 0.02], [0.9, 0.2, 0.1], 0.8),
            ([0.52, 0.47], -0.9, [0.03, 0.05], [0.1, 0.8, 0.3], 0.6),
            ([0.66, 0.61], 1.7, [0.04, 0.04], [0.2, 0.3, 0.9], 0.7),
            ([0.45, 0.58], 2.6, [0.08, 0.03], [0.7, 0.7, 0.2], 0.55),
        ];
        for (i, (center, rot, scale, color, op)) in pts.iter().enumerate() {
            out.push(Splat {
                key: key(i as u64),
                center: *center,
                rotation: *rot,
                scale: *scale,
                color: *color,
                opacity: *op,
            });
        }
        out
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        // Pack all splat attributes into one parameter vector and check the
        // taped composite against central differences.
        let splats = demo_splats();
        let n = splats.len();
        let camera = cam(16);
        let mut packed = Vec::new();
        for s in &splats {
            packed.extend_from_slice(&s.center);
            packed.push(s.rotation);
            packed.extend_from_slice(&s.scale);
            packed.extend_from_slice(&s.color);
            packed.push(s.opacity);
        }
        let point = vec![Tensor::new(vec![n, 9], packed).unwrap()];
        let keys: Vec<SortKey> = (0..n as u64).map(key).collect();

        let report = grad_check(
            move |tape, ids| {
                let centers = tape.slice(ids[0], 1, 0, 2)?;
                let rotations = tape.slice(ids[0], 1, 2, 1)?;
                let scales = tape.slice(ids[0], 1, 3, 2)?;
                let colors = tape.slice(ids[0], 1, 5, 3)?;
                let opacities = tape.slice(ids[0], 1, 8, 1)?;
                let img = composite_on_tape(
                    tape,
                    centers,
                    rotations,
                    scales,
                    colors,
                    opacities,
                    keys.clone(),
                    camera,
                    RenderSettings::reference(),
                )?;
                let sq = tape.square(img)?;
                tape.mean(sq)
            },
            &point,
            1e-5,
            5e-5,
        )
        .unwrap();
        assert!(
            report.fraction_within_tol() >= 0.99 && report.max_rel_err < 1e-3,
            "frac {} max {}",
            report.fraction_within_tol(),
            report.max_rel_err
        );
    }

    #[test]
    fn taped_composite_value_matches_plain() {
        let splats = demo_splats();
        let n = splats.len();
        let camera = cam(16);
        let settings = RenderSettings::default();
        let plain = composite(&splats, &camera, &settings).unwrap();

        let mut tape = Tape::new();
        let centers = tape.constant(
            Tensor::new(vec![n, 2], splats.iter().flat_map(|s| s.center).collect()).unwrap(),
        );
        let rotations = tape.constant(
            Tensor::new(vec![n, 1], splats.iter().map(|s| s.rotation).collect()).unwrap(),
        );
        let scales = tape.constant(
            Tensor::new(vec![n, 2], splats.iter().flat_map(|s| s.scale).collect()).unwrap(),
        );
        let colors = tape.constant(
            Tensor::new(vec![n, 3], splats.iter().flat_map(|s| s.color).collect()).unwrap(),
        );
        let opacities = tape
            .constant(Tensor::new(vec![n, 1], splats.iter().map(|s| s.opacity).collect()).unwrap());
        let keys: Vec<SortKey> = (0..n as u64).map(key).collect();
        let img = composite_on_tape(
            &mut tape, centers, rotations, scales, colors, opacities, keys, camera, settings,
        )
        .unwrap();
        let taped = Image::from_tensor(tape.value(img)).unwrap();
        assert_eq!(taped.max_abs_diff(&plain), 0.0);

        // Backward through the tape runs and returns matching shapes.
        let sq = tape.square(img).unwrap();
        let loss = tape.mean(sq).unwrap();
        let grads = backward(&tape, loss).unwrap();
        assert_eq!(grads.get(&tape, centers).shape(), &[n, 2]);
    }
}
