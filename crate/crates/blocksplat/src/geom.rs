//! Flatland geometry: axis-aligned rectangles, the scene domain, and square
//! viewport cameras.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Axis-aligned rectangle, `min` inclusive / `max` exclusive unless stated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Self {
        Rect { min, max }
    }

    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> [f64; 2] {
        [
            (self.min[0] + self.max[0]) * 0.5,
            (self.min[1] + self.max[1]) * 0.5,
        ]
    }

    /// Closed containment (both edges inclusive).
    pub fn contains_closed(&self, p: [f64; 2]) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }

    /// Half-open containment: lower edges inclusive, upper exclusive.
    pub fn contains_half_open(&self, p: [f64; 2]) -> bool {
        p[0] >= self.min[0] && p[0] < self.max[0] && p[1] >= self.min[1] && p[1] < self.max[1]
    }

    /// Overlap test with closed boundaries (touching rectangles intersect).
    pub fn intersects(&self, other: &Rect) -> bool {
        self.min[0] <= other.max[0]
            && other.min[0] <= self.max[0]
            && self.min[1] <= other.max[1]
            && other.min[1] <= self.max[1]
    }

    /// Grow by `dx`/`dy` per side, then clip to `clip`.
    pub fn inflated_clipped(&self, dx: f64, dy: f64, clip: &Rect) -> Rect {
        Rect {
            min: [
                (self.min[0] - dx).max(clip.min[0]),
                (self.min[1] - dy).max(clip.min[1]),
            ],
            max: [
                (self.max[0] + dx).min(clip.max[0]),
                (self.max[1] + dy).min(clip.max[1]),
            ],
        }
    }
}

/// The world bounds of the flatland scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneDomain {
    pub bounds: Rect,
}

impl Default for SceneDomain {
    fn default() -> Self {
        SceneDomain {
            bounds: Rect::new([0.0, 0.0], [1.0, 1.0]),
        }
    }
}

impl SceneDomain {
    pub fn new(bounds: Rect) -> Result<Self> {
        if bounds.area() <= 0.0 || bounds.area().is_nan() {
            return Err(Error::validation(format!(
                "domain must have positive area: {bounds:?}"
            )));
        }
        Ok(SceneDomain { bounds })
    }

    pub fn diagonal(&self) -> f64 {
        (self.bounds.width().powi(2) + self.bounds.height().powi(2)).sqrt()
    }
}

/// Axis-aligned square viewport: center plus half extent, with a pixel grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub id: u32,
    pub center: [f64; 2],
    pub half_extent: f64,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn viewport(&self) -> Rect {
        Rect {
            min: [
                self.center[0] - self.half_extent,
                self.center[1] - self.half_extent,
            ],
            max: [
                self.center[0] + self.half_extent,
                self.center[1] + self.half_extent,
            ],
        }
    }

    pub fn validate(&self, domain: &SceneDomain) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::validation(format!(
                "camera {} resolution {}x{} below 8x8",
                self.id, self.width, self.height
            )));
        }
        if self.half_extent <= 0.0 || self.half_extent.is_nan() {
            return Err(Error::validation(format!(
                "camera {} has non-positive zoom",
                self.id
            )));
        }
        if !self.viewport().intersects(&domain.bounds) {
            return Err(Error::validation(format!(
                "camera {} viewport does not intersect the domain",
                self.id
            )));
        }
        Ok(())
    }
}

/// Seeded, stream-separated RNG derivation. Different purposes and indices
/// get statistically independent ChaCha streams from one master seed.
pub fn derive_rng(master: u64, purpose: &str, index: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    // FNV-1a over the purpose tag keeps the derivation platform-independent.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in purpose.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mixed =
        splitmix64(master ^ h).wrapping_add(splitmix64(index.wrapping_add(0x9e3779b97f4a7c15)));
    rand_chacha::ChaCha8Rng::seed_from_u64(mixed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn rect_half_open_edges() {
        let r = Rect::new([0.0, 0.0], [0.5, 0.5]);
        assert!(r.contains_half_open([0.0, 0.0]));
        assert!(!r.contains_half_open([0.5, 0.25]));
        assert!(r.contains_closed([0.5, 0.5]));
    }

    #[test]
    fn derive_rng_streams_differ_and_repeat() {
        let mut a = derive_rng(7, "scene", 0);
        let mut a2 = derive_rng(7, "scene", 0);
        let mut b = derive_rng(7, "scene", 1);
        let mut c = derive_rng(7, "views", 0);
        let x = a.next_u64();
        assert_eq!(x, a2.next_u64());
        assert_ne!(x, b.next_u64());
        assert_ne!(x, c.next_u64());
    }

    #[test]
    fn zero_area_domain_rejected() {
        assert!(SceneDomain::new(Rect::new([0.0, 0.0], [1.0, 0.0])).is_err());
    }
}
