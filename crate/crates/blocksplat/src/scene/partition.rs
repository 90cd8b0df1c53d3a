//! Grid partition of the domain into blocks and visibility-based view
//! assignment.

use crate::error::{Error, Result};
use crate::geom::{Camera, Rect, SceneDomain};
use crate::scene::Anchor;

/// A spatial partition cell. The core rectangles tile the domain with
/// disjoint interiors; the extended region adds the overlap strip the block
/// also reconstructs.
#[derive(Debug, Clone)]
pub struct Block {
    pub id: u32,
    pub core: Rect,
    pub extended: Rect,
    pub anchors: Vec<Anchor>,
}

/// Split the domain into an nx-by-ny grid of equal-area cores; block ids are
/// row-major starting at the domain minimum corner. Extended regions inflate
/// each core by `overlap_ratio` of the cell size per side, clipped to the
/// domain.
pub fn partition(domain: &SceneDomain, nx: u32, ny: u32, overlap_ratio: f64) -> Result<Vec<Block>> {
    if nx < 1 || ny < 1 {
        return Err(Error::validation("partition needs nx, ny >= 1"));
    }
    if !(0.0..=0.5).contains(&overlap_ratio) {
        return Err(Error::validation(format!(
            "overlap_ratio {overlap_ratio} outside [0, 0.5]"
        )));
    }
    let b = domain.bounds;
    // Shared edge arrays: adjacent blocks reference identical f64 boundary
    // values, making the tiling exact.
    let xs: Vec<f64> = (0..=nx)
        .map(|i| {
            if i == nx {
                b.max[0]
            } else {
                b.min[0] + b.width() * (i as f64 / nx as f64)
            }
        })
        .collect();
    let ys: Vec<f64> = (0..=ny)
        .map(|j| {
            if j == ny {
                b.max[1]
            } else {
                b.min[1] + b.height() * (j as f64 / ny as f64)
            }
        })
        .collect();
    let dx = overlap_ratio * b.width() / nx as f64;
    let dy = overlap_ratio * b.height() / ny as f64;
    let mut blocks = Vec::with_capacity((nx * ny) as usize);
    for j in 0..ny {
        for i in 0..nx {
            let core = Rect::new(
                [xs[i as usize], ys[j as usize]],
                [xs[(i + 1) as usize], ys[(j + 1) as usize]],
            );
            let extended = core.inflated_clipped(dx, dy, &b);
            blocks.push(Block {
                id: j * nx + i,
                core,
                extended,
                anchors: Vec::new(),
            });
        }
    }
    Ok(blocks)
}

/// Ownership test for merge: the core contains the point half-open
/// (lower-inclusive), except that cores on the domain's max edges also
/// include that edge so the union covers the closed domain.
pub fn core_owns(block: &Block, domain: &SceneDomain, p: [f64; 2]) -> bool {
    let hi_x = if block.core.max[0] == domain.bounds.max[0] {
        p[0] <= block.core.max[0]
    } else {
        p[0] < block.core.max[0]
    };
    let hi_y = if block.core.max[1] == domain.bounds.max[1] {
        p[1] <= block.core.max[1]
    } else {
        p[1] < block.core.max[1]
    };
    p[0] >= block.core.min[0] && p[1] >= block.core.min[1] && hi_x && hi_y
}

/// A camera is assigned to a block iff its viewport rectangle intersects the
/// block's extended region; cameras may belong to several blocks.
pub fn assign_views(cameras: &[Camera], blocks: &[Block]) -> Result<Vec<Vec<u32>>> {
    let mut per_block: Vec<Vec<u32>> = vec![Vec::new(); blocks.len()];
    for cam in cameras {
        let vp = cam.viewport();
        let mut hit = false;
        for (bi, block) in blocks.iter().enumerate() {
            if vp.intersects(&block.extended) {
                per_block[bi].push(cam.id);
                hit = true;
            }
        }
        if !hit {
            return Err(Error::contract(format!(
                "camera {} is visible to no block (viewport outside the domain?)",
                cam.id
            )));
        }
    }
    Ok(per_block)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::derive_rng;
    use rand::Rng;

    fn unit_domain() -> SceneDomain {
        SceneDomain::default()
    }

    #[test]
    fn two_by_two_first_core() {
        let blocks = partition(&unit_domain(), 2, 2, 0.0).unwrap();
        assert_eq!(blocks.len(), 4);
        assert_eq!(blocks[0].core, Rect::new([0.0, 0.0], [0.5, 0.5]));
        assert_eq!(blocks[0].extended, blocks[0].core);
    }

    #[test]
    fn single_block_covers_domain() {
        let blocks = partition(&unit_domain(), 1, 1, 0.1).unwrap();
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].core, unit_domain().bounds);
        assert_eq!(blocks[0].extended, unit_domain().bounds);
    }

    #[test]
    fn extension_clipped_at_domain_edge() {
        let blocks = partition(&unit_domain(), 2, 1, 0.1).unwrap();
        let e = blocks[0].extended;
        assert!((e.max[0] - 0.55).abs() < 1e-15);
        assert_eq!(e.min[0], 0.0);
        assert_eq!(e.min[1], 0.0);
        assert_eq!(e.max[1], 1.0);
    }

    #[test]
    fn tiling_is_exact() {
        for (nx, ny) in [(3u32, 2u32), (4, 2), (5, 3), (1, 7)] {
            let blocks = partition(&unit_domain(), nx, ny, 0.2).unwrap();
            // Shared edges: block (i+1) left edge equals block i right edge bitwise.
            for j in 0..ny {
                for i in 0..nx.saturating_sub(1) {
                    let a = &blocks[(j * nx + i) as usize];
                    let b = &blocks[(j * nx + i + 1) as usize];
                    assert_eq!(a.core.max[0].to_bits(), b.core.min[0].to_bits());
                }
            }
            let area: f64 = blocks.iter().map(|b| b.core.area()).sum();
            assert!((area - 1.0).abs() < 1e-12);
            // Every sampled point is core-owned by exactly one block.
            let mut rng = derive_rng(3, "tiling", (nx * 100 + ny) as u64);
            let domain = unit_domain();
            for _ in 0..500 {
                let p = [rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)];
                let owners = blocks.iter().filter(|b| core_owns(b, &domain, p)).count();
                assert_eq!(owners, 1, "point {p:?} owned by {owners} blocks");
            }
        }
    }

    #[test]
    fn view_inside_one_core_assigned_once() {
        let blocks = partition(&unit_domain(), 2, 1, 0.0).unwrap();
        let cam = Camera {
            id: 0,
            center: [0.25, 0.5],
            half_extent: 0.1,
            width: 16,
            height: 16,
        };
        let assign = assign_views(&[cam], &blocks).unwrap();
        assert_eq!(assign[0], vec![0]);
        assert!(assign[1].is_empty());
    }

    #[test]
    fn straddling_view_assigned_to_both() {
        let blocks = partition(&unit_domain(), 2, 1, 0.0).unwrap();
        let cam = Camera {
            id: 3,
            center: [0.5, 0.5],
            half_extent: 0.1,
            width: 16,
            height: 16,
        };
        let assign = assign_views(&[cam], &blocks).unwrap();
        assert_eq!(assign[0], vec![3]);
        assert_eq!(assign[1], vec![3]);
    }

    #[test]
    fn camera_outside_all_blocks_is_contract_error() {
        use crate::error::Error;
        let blocks = partition(&unit_domain(), 2, 1, 0.0).unwrap();
        let cam = Camera {
            id: 9,
            center: [5.0, 5.0],
            half_extent: 0.1,
            width: 16,
            height: 16,
        };
        assert!(matches!(
            assign_views(&[cam], &blocks),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn assignment_matches_bruteforce_oracle() {
        let blocks = partition(&unit_domain(), 2, 2, 0.1).unwrap();
        let mut rng = derive_rng(11, "cams", 0);
        let cameras: Vec<Camera> = (0..40)
            .map(|id| Camera {
                id,
                center: [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)],
                half_extent: rng.random_range(0.05..0.3),
                width: 16,
                height: 16,
            })
            .collect();
        let assign = assign_views(&cameras, &blocks).unwrap();
        // Brute-force interval overlap test per (camera, block) pair.
        for (bi, block) in blocks.iter().enumerate() {
            for cam in &cameras {
                let vp = cam.viewport();
                let overlap_x =
                    vp.min[0].max(block.extended.min[0]) <= vp.max[0].min(block.extended.max[0]);
                let overlap_y =
                    vp.min[1].max(block.extended.min[1]) <= vp.max[1].min(block.extended.max[1]);
                let expected = overlap_x && overlap_y;
                assert_eq!(assign[bi].contains(&cam.id), expected);
            }
        }
    }
}
