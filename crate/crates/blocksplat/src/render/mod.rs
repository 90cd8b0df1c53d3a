//! Differentiable flatland splatting: anisotropic 2D Gaussians composited
//! front-to-back into a square viewport, with analytic gradients for every
//! splat attribute.

pub mod composite;

pub use composite::{
    composite, composite_backward, composite_on_tape, composite_with_aux, CompositeAux, SplatGrad,
};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geom::Camera;

/// Deterministic blending order: (block id, anchor id, slot).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SortKey {
    pub block: u32,
    pub anchor: u64,
    pub slot: u32,
}

/// One renderable Gaussian splat.
#[derive(Debug, Clone)]
pub struct Splat {
    pub key: SortKey,
    /// World-space center.
    pub center: [f64; 2],
    /// Rotation angle in radians (unbounded).
    pub rotation: f64,
    /// Principal-axis standard deviations in world units, both > 0.
    pub scale: [f64; 2],
    pub color: [f64; 3],
    /// Opacity in (0, 1].
    pub opacity: f64,
}

/// Rasterizer thresholds. `bounded` enables the conservative per-splat pixel
/// bounding box; pixels outside it have sigma below `tau_opacity` and are
/// skipped by the reference path too, so both paths agree bitwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    /// Terms with sigma below this are skipped.
    pub tau_opacity: f64,
    /// Per-pixel accumulation stops when transmittance drops below this.
    pub eps_transmittance: f64,
    pub bounded: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            tau_opacity: 0.005,
            eps_transmittance: 1e-4,
            bounded: true,
        }
    }
}

impl RenderSettings {
    pub fn reference() -> Self {
        RenderSettings {
            bounded: false,
            ..Default::default()
        }
    }
}

/// RGB image with f64 channels; values live in [0, 1] during training and
/// are quantized to 8 bits only at export.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Result<Self> {
        if data.len() != (width as usize) * (height as usize) * 3 {
            return Err(Error::shape(format!(
                "image {}x{} needs {} values, got {}",
                width,
                height,
                width as usize * height as usize * 3,
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn black(width: u32, height: u32) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width as usize * height as usize * 3],
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f64; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height as usize, self.width as usize, 3],
            self.data.clone(),
        )
        .expect("image tensor")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::shape(format!(
                "image tensor must be [H, W, 3], got {s:?}"
            )));
        }
        Image::new(s[1] as u32, s[0] as u32, t.data().to_vec())
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// World point to continuous pixel coordinates.
pub fn project_point(camera: &Camera, p: [f64; 2]) -> [f64; 2] {
    let h = camera.half_extent;
    let sx = camera.width as f64 / (2.0 * h);
    let sy = camera.height as f64 / (2.0 * h);
    [
        (p[0] - (camera.center[0] - h)) * sx,
        (p[1] - (camera.center[1] - h)) * sy,
    ]
}

/// Per-axis world-to-pixel scale factors (W/2h, H/2h).
pub fn pixel_scale(camera: &Camera) -> [f64; 2] {
    [
        camera.width as f64 / (2.0 * camera.half_extent),
        camera.height as f64 / (2.0 * camera.half_extent),
    ]
}

/// World-space covariance of a splat: R diag(s1^2, s2^2) R^T as
/// (xx, xy, yy) components.
pub fn world_covariance(rotation: f64, scale: [f64; 2]) -> [f64; 3] {
    let (s, c) = rotation.sin_cos();
    let (v1, v2) = (scale[0] * scale[0], scale[1] * scale[1]);
    [
        c * c * v1 + s * s * v2,
        c * s * (v1 - v2),
        s * s * v1 + c * c * v2,
    ]
}

/// Exact unnormalized Gaussian e^{-1/2 (x-mu)^T Sigma^{-1} (x-mu)} via the
/// closed-form 2x2 inverse.
pub fn evaluate_gaussian(
    center: [f64; 2],
    rotation: f64,
    scale: [f64; 2],
    x: [f64; 2],
) -> Result<f64> {
    if scale[0] <= 1e-12 || scale[1] <= 1e-12 {
        return Err(Error::numerics(format!(
            "gaussian scale {scale:?} at or below 1e-12"
        )));
    }
    let cov = world_covariance(rotation, scale);
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    let inv = [cov[2] / det, -cov[1] / det, cov[0] / det];
    let d = [x[0] - center[0], x[1] - center[1]];
    let q = inv[0] * d[0] * d[0] + 2.0 * inv[1] * d[0] * d[1] + inv[2] * d[1] * d[1];
    Ok((-0.5 * q).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_peak_is_one() {
        let v = evaluate_gaussian([0.3, 0.7], 1.1, [0.05, 0.02], [0.3, 0.7]).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn unit_covariance_offset_one_one() {
        // Sigma = I, x - mu = (1, 1) -> exp(-1)
        let v = evaluate_gaussian([0.0, 0.0], 0.0, [1.0, 1.0], [1.0, 1.0]).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        assert!((v - 0.36787944117144233).abs() < 1e-15);
    }

    #[test]
    fn isotropic_rotation_invariance() {
        for k in 0..8 {
            let theta = k as f64 * 0.773;
            let a = evaluate_gaussian([0.0, 0.0], theta, [0.3, 0.3], [0.21, -0.13]).unwrap();
            let r = (0.21f64 * 0.21 + 0.13 * 0.13).sqrt();
            let expect = (-0.5 * (r / 0.3).powi(2)).exp();
            assert!((a - expect).abs() < 1e-12, "theta {theta}: {a} vs {expect}");
        }
    }

    #[test]
    fn tiny_scale_rejected() {
        assert!(evaluate_gaussian([0.0; 2], 0.0, [1e-13, 0.1], [0.0; 2]).is_err());
    }

    #[test]
    fn projection_examples() {
        let cam = Camera {
            id: 0,
            center: [0.5, 0.5],
            half_extent: 0.5,
            width: 64,
            height: 64,
        };
        assert_eq!(project_point(&cam, [0.5, 0.5]), [32.0, 32.0]);
        assert_eq!(project_point(&cam, [0.0, 0.0]), [0.0, 0.0]);
        let zoomed = Camera {
            half_extent: 0.25,
            ..cam
        };
        assert_eq!(project_point(&zoomed, [0.5, 0.5]), [32.0, 32.0]);
        assert_eq!(project_point(&zoomed, [0.25, 0.25]), [0.0, 0.0]);
    }
}
