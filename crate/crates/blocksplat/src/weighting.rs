//! Reconstruction-guided block weighting: deviations from the best block's
//! smoothed metrics map to a Gaussian-shaped weight in [1, 2).

use crate::config::WeightingCfg;
use crate::error::{Error, Result};
use crate::metrics::BlockMetricTracker;

/// Per-block deviations from the best tracked block.
#[derive(Debug, Clone, PartialEq)]
pub struct Deviations {
    /// (psnr deviation, ssim deviation) per block, both >= 0.
    pub per_block: Vec<(f64, f64)>,
    pub psnr_max: f64,
    pub ssim_max: f64,
}

/// PSNR_max / SSIM_max over the tracked EMAs and each block's shortfall.
pub fn deviations(trackers: &[BlockMetricTracker]) -> Result<Deviations> {
    if trackers.is_empty() {
        return Err(Error::contract("deviations over zero trackers"));
    }
    for t in trackers {
        if !t.initialized {
            return Err(Error::contract(format!(
                "tracker for block {} is uninitialized",
                t.block_id
            )));
        }
    }
    let psnr_max = trackers
        .iter()
        .map(|t| t.psnr_ema)
        .fold(f64::NEG_INFINITY, f64::max);
    let ssim_max = trackers
        .iter()
        .map(|t| t.ssim_ema)
        .fold(f64::NEG_INFINITY, f64::max);
    let per_block = trackers
        .iter()
        .map(|t| (psnr_max - t.psnr_ema, ssim_max - t.ssim_ema))
        .collect();
    Ok(Deviations {
        per_block,
        psnr_max,
        ssim_max,
    })
}

/// Weight for one block: 2 - exp(-(dp^2 + lambda ds^2) / (2 sigma^2)),
/// clamped by `cfg.cap`. Disabled deviation channels are treated as zero.
/// The exponential is floored at 2 ulps so the weight stays strictly below 2
/// even when the exponent underflows.
pub fn block_weight(delta_psnr: f64, delta_ssim: f64, cfg: &WeightingCfg) -> f64 {
    let dp = if cfg.use_psnr { delta_psnr } else { 0.0 };
    let ds = if cfg.use_ssim { delta_ssim } else { 0.0 };
    let arg = -(dp * dp + cfg.lambda * ds * ds) / (2.0 * cfg.sigma * cfg.sigma);
    let e = arg.exp().max(2.0 * f64::EPSILON);
    (2.0 - e).min(cfg.cap)
}

/// Weights for every block given its tracker deviations.
pub fn block_weights(dev: &Deviations, cfg: &WeightingCfg) -> Vec<f64> {
    dev.per_block
        .iter()
        .map(|&(dp, ds)| block_weight(dp, ds, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricReport;
    use proptest::prelude::*;

    fn tracker(id: u32, psnr: f64, ssim: f64) -> BlockMetricTracker {
        let mut t = BlockMetricTracker::new(id, 0.9);
        t.update(&MetricReport {
            psnr,
            ssim,
            l1: 0.0,
        });
        t
    }

    #[test]
    fn single_block_has_zero_deviation() {
        let d = deviations(&[tracker(0, 21.0, 0.7)]).unwrap();
        assert_eq!(d.per_block, vec![(0.0, 0.0)]);
        assert_eq!(d.psnr_max, 21.0);
    }

    #[test]
    fn deviations_are_max_minus_ema() {
        let d = deviations(&[tracker(0, 20.0, 0.5), tracker(1, 23.0, 0.8)]).unwrap();
        assert_eq!(d.per_block[0], (3.0, 0.30000000000000004));
        assert_eq!(d.per_block[1], (0.0, 0.0));
    }

    #[test]
    fn uninitialized_tracker_rejected() {
        let t = BlockMetricTracker::new(0, 0.9);
        assert!(matches!(deviations(&[t]), Err(Error::Contract(_))));
    }

    #[test]
    fn deviations_match_bruteforce_oracle() {
        use rand::Rng;
        let mut rng = crate::geom::derive_rng(5, "devs", 0);
        let trackers: Vec<BlockMetricTracker> = (0..16)
            .map(|i| tracker(i, rng.random_range(5.0..40.0), rng.random_range(-0.2..1.0)))
            .collect();
        let d = deviations(&trackers).unwrap();
        let pmax = trackers.iter().map(|t| t.psnr_ema).fold(f64::MIN, f64::max);
        let smax = trackers.iter().map(|t| t.ssim_ema).fold(f64::MIN, f64::max);
        for (i, t) in trackers.iter().enumerate() {
            assert_eq!(d.per_block[i].0, pmax - t.psnr_ema);
            assert_eq!(d.per_block[i].1, smax - t.ssim_ema);
        }
    }

    #[test]
    fn best_block_weight_is_exactly_one() {
        let cfg = WeightingCfg::default();
        assert_eq!(block_weight(0.0, 0.0, &cfg), 1.0);
    }

    #[test]
    fn weight_limit_approaches_two() {
        let cfg = WeightingCfg::default();
        let w = block_weight(1e6, 0.0, &cfg);
        assert!(w < 2.0 && w > 1.999999);
    }

    #[test]
    fn spot_value_half_exponent() {
        // dp = 2, ds = 0, sigma = 2 -> 2 - exp(-0.5).
        let cfg = WeightingCfg {
            sigma: 2.0,
            lambda: 123.0,
            ..Default::default()
        };
        let w = block_weight(2.0, 0.0, &cfg);
        assert!((w - (2.0 - (-0.5f64).exp())).abs() < 1e-15);
        assert!((w - 1.3934693402873666).abs() <= 1e-9);
    }

    #[test]
    fn channel_toggles_select_variant() {
        let psnr_only = WeightingCfg {
            use_ssim: false,
            ..Default::default()
        };
        assert_eq!(
            block_weight(3.0, 0.4, &psnr_only),
            block_weight(3.0, 0.0, &WeightingCfg::default())
        );
        let ssim_only = WeightingCfg {
            use_psnr: false,
            ..Default::default()
        };
        assert_eq!(
            block_weight(3.0, 0.4, &ssim_only),
            block_weight(0.0, 0.4, &WeightingCfg::default())
        );
    }

    #[test]
    fn argmax_invariance_under_constant_shift() {
        let cfg = WeightingCfg::default();
        let base = [(0.0, 0.0), (2.5, 0.1), (5.0, 0.3)];
        let shifted: Vec<BlockMetricTracker> = base
            .iter()
            .enumerate()
            .map(|(i, &(dp, ds))| tracker(i as u32, 30.0 - dp + 7.0, 0.9 - ds))
            .collect();
        let unshifted: Vec<BlockMetricTracker> = base
            .iter()
            .enumerate()
            .map(|(i, &(dp, ds))| tracker(i as u32, 30.0 - dp, 0.9 - ds))
            .collect();
        let wa = block_weights(&deviations(&shifted).unwrap(), &cfg);
        let wb = block_weights(&deviations(&unshifted).unwrap(), &cfg);
        assert_eq!(wa, wb);
    }

    proptest! {
        #[test]
        fn weight_range_and_monotonicity(
            dp in 0.0..60.0f64,
            ds in 0.0..2.0f64,
            sigma in 0.2..10.0f64,
            lambda in 0.0..1000.0f64,
            bump in 1e-6..5.0f64,
        ) {
            let cfg = WeightingCfg { sigma, lambda, ..Default::default() };
            let w = block_weight(dp, ds, &cfg);
            prop_assert!((1.0..2.0).contains(&w), "w = {w}");
            prop_assert!(block_weight(dp + bump, ds, &cfg) >= w);
            prop_assert!(block_weight(dp, ds + bump, &cfg) >= w);
        }
    }
}
