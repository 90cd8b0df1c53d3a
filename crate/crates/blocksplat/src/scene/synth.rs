//! Synthetic ground-truth scenes and their reference renders.

use crate::error::{Error, Result};
use crate::geom::{derive_rng, Camera, SceneDomain};
use crate::render::{composite, Image, RenderSettings, SortKey, Splat};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// One oracle Gaussian with a simple linear view-dependent color:
/// c(d) = clamp01(base + amplitude * dot(axis, d_hat)) per channel, where
/// d_hat is the unit direction from the camera center to the Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthGaussian {
    pub center: [f64; 2],
    pub rotation: f64,
    pub scales: [f64; 2],
    pub base_color: [f64; 3],
    pub view_amplitude: [f64; 3],
    pub view_axis: [f64; 2],
    pub opacity: f64,
}

impl GroundTruthGaussian {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.opacity && self.opacity <= 1.0) {
            return Err(Error::validation(format!(
                "gt opacity {} outside (0, 1]",
                self.opacity
            )));
        }
        if !(self.scales[0] > 0.0 && self.scales[1] > 0.0) {
            return Err(Error::validation(format!(
                "gt scales {:?} must be positive",
                self.scales
            )));
        }
        Ok(())
    }

    /// View-dependent color for a camera position.
    pub fn color_for(&self, camera_center: [f64; 2]) -> [f64; 3] {
        let dx = self.center[0] - camera_center[0];
        let dy = self.center[1] - camera_center[1];
        let norm = (dx * dx + dy * dy).sqrt();
        let dot = if norm < 1e-12 {
            0.0
        } else {
            (self.view_axis[0] * dx + self.view_axis[1] * dy) / norm
        };
        let mut c = [0.0; 3];
        for (out, (b, a)) in c
            .iter_mut()
            .zip(self.base_color.iter().zip(&self.view_amplitude))
        {
            *out = (b + a * dot).clamp(0.0, 1.0);
        }
        c
    }
}

/// Seeded draw of `n_gt` Gaussians: centers uniform in the domain, scales
/// log-uniform in [0.01, 0.06] world units, opacity uniform in [0.5, 1].
pub fn generate_synthetic_scene(
    seed: u64,
    n_gt: u32,
    domain: &SceneDomain,
) -> Result<Vec<GroundTruthGaussian>> {
    if n_gt < 1 {
        return Err(Error::validation("n_gt must be >= 1"));
    }
    let mut rng = derive_rng(seed, "scene", 0);
    let b = domain.bounds;
    let (ln_lo, ln_hi) = (0.01f64.ln(), 0.06f64.ln());
    let mut out = Vec::with_capacity(n_gt as usize);
    for _ in 0..n_gt {
        let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let g = GroundTruthGaussian {
            center: [
                rng.random_range(b.min[0]..b.max[0]),
                rng.random_range(b.min[1]..b.max[1]),
            ],
            rotation: rng.random_range(0.0..std::f64::consts::PI),
            scales: [
                rng.random_range(ln_lo..=ln_hi).exp(),
                rng.random_range(ln_lo..=ln_hi).exp(),
            ],
            base_color: [
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
            ],
            view_amplitude: [
                rng.random_range(0.12..0.25),
                rng.random_range(0.12..0.25),
                rng.random_range(0.12..0.25),
            ],
            view_axis: [theta.cos(), theta.sin()],
            opacity: rng.random_range(0.5..1.0),
        };
        out.push(g);
    }
    Ok(out)
}

/// Splat list for a ground-truth scene as seen from one camera, in the
/// deterministic generation order.
pub fn gt_splats(scene: &[GroundTruthGaussian], camera: &Camera) -> Vec<Splat> {
    scene
        .iter()
        .enumerate()
        .map(|(i, g)| Splat {
            key: SortKey {
                block: 0,
                anchor: i as u64,
                slot: 0,
            },
            center: g.center,
            rotation: g.rotation,
            scale: g.scales,
            color: g.color_for(camera.center),
            opacity: g.opacity,
        })
        .collect()
}

/// Deterministic ground-truth render over a black background, using the
/// same compositing path as the trainable renderer.
pub fn render_ground_truth(scene: &[GroundTruthGaussian], camera: &Camera) -> Result<Image> {
    composite(
        &gt_splats(scene, camera),
        camera,
        &RenderSettings::default(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> Camera {
        Camera {
            id: 0,
            center: [0.5, 0.5],
            half_extent: 0.5,
            width: 32,
            height: 32,
        }
    }

    #[test]
    fn empty_scene_renders_black() {
        let img = render_ground_truth(&[], &cam()).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_amplitude_color_is_view_independent() {
        let g = GroundTruthGaussian {
            center: [0.3, 0.6],
            rotation: 0.4,
            scales: [0.05, 0.02],
            base_color: [0.2, 0.5, 0.9],
            view_amplitude: [0.0; 3],
            view_axis: [1.0, 0.0],
            opacity: 0.8,
        };
        assert_eq!(g.color_for([0.0, 0.0]), [0.2, 0.5, 0.9]);
        assert_eq!(g.color_for([0.9, 0.1]), [0.2, 0.5, 0.9]);
    }

    #[test]
    fn single_term_center_pixel() {
        // One Gaussian at a pixel center with sigma 0.5 there and red base color.
        let c = 8.5 / 16.0;
        let g = GroundTruthGaussian {
            center: [c, c],
            rotation: 0.0,
            scales: [0.08, 0.08],
            base_color: [1.0, 0.0, 0.0],
            view_amplitude: [0.0; 3],
            view_axis: [1.0, 0.0],
            opacity: 0.5,
        };
        let camera = Camera {
            id: 0,
            center: [0.5, 0.5],
            half_extent: 0.5,
            width: 16,
            height: 16,
        };
        let img = render_ground_truth(&[g], &camera).unwrap();
        let px = img.pixel(8, 8);
        assert!((px[0] - 0.5).abs() < 1e-12);
        assert_eq!(px[1], 0.0);
    }

    #[test]
    fn scene_generation_seeded_and_valid() {
        let domain = SceneDomain::default();
        let a = generate_synthetic_scene(7, 64, &domain).unwrap();
        let b = generate_synthetic_scene(7, 64, &domain).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_scene(8, 64, &domain).unwrap();
        assert_ne!(a, c);
        assert!(generate_synthetic_scene(7, 0, &domain).is_err());
        for g in &a {
            g.validate().unwrap();
            assert!(domain.bounds.contains_closed(g.center));
            for s in g.scales {
                assert!((0.01..=0.06).contains(&s));
            }
            assert!((0.5..=1.0).contains(&g.opacity));
            for a in g.view_amplitude {
                assert!((0.0..=0.25).contains(&a));
            }
            let n = (g.view_axis[0].powi(2) + g.view_axis[1].powi(2)).sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn render_is_pure() {
        let domain = SceneDomain::default();
        let scene = generate_synthetic_scene(5, 16, &domain).unwrap();
        let a = render_ground_truth(&scene, &cam()).unwrap();
        let b = render_ground_truth(&scene, &cam()).unwrap();
        assert_eq!(a.max_abs_diff(&b), 0.0);
    }
}
