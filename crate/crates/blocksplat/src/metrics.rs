//! Reconstruction losses and quality metrics: L1, SSIM (forward and
//! differentiable), PSNR, and the momentum-smoothed per-block tracker.
//!
//! SSIM follows Wang et al. 2004: 11x11 Gaussian window (sigma 1.5),
//! C1 = 0.01^2 and C2 = 0.03^2 on unit dynamic range, channel-averaged over
//! valid windows only (no padding).

use crate::autodiff::{Tape, Tensor, ValueId};
use crate::error::{Error, Result};
use crate::render::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// PSNR is capped here so a perfect block keeps deviations finite.
pub const PSNR_CAP_DB: f64 = 60.0;

/// Per-evaluation metric bundle.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
}

fn check_dims(pred: &Image, gt: &Image) -> Result<()> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::shape(format!(
            "image dims {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    Ok(())
}

/// Mean absolute error over all pixel channels.
pub fn l1_loss(pred: &Image, gt: &Image) -> Result<f64> {
    check_dims(pred, gt)?;
    let n = pred.data().len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// Mean squared error over all pixel channels.
pub fn mse(pred: &Image, gt: &Image) -> Result<f64> {
    check_dims(pred, gt)?;
    let n = pred.data().len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// 10 log10(1 / MSE) on unit range, capped at [`PSNR_CAP_DB`].
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    let m = mse(pred, gt)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP_DB))
}

/// The normalized 1-D window; the center tap absorbs the normalization
/// residue so the taps sum to exactly 1.0.
fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= sum;
    }
    let resid: f64 = k.iter().sum::<f64>() - 1.0;
    k[SSIM_WINDOW / 2] -= resid;
    k
}

/// Valid separable convolution of a single-channel plane with the SSIM window.
fn conv_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (dx, kv) in k.iter().enumerate() {
                acc += kv * plane[y * w + x + dx];
            }
            horiz[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (dy, kv) in k.iter().enumerate() {
                acc += kv * horiz[(y + dy) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Transpose of [`conv_valid`]: scatter a valid-window map back onto the plane.
fn scatter_valid(map: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut vert = vec![0.0; h * ow];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            if v == 0.0 {
                continue;
            }
            for (dy, kv) in k.iter().enumerate() {
                vert[(y + dy) * ow + x] += kv * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            let v = vert[y * ow + x];
            if v == 0.0 {
                continue;
            }
            for (dx, kv) in k.iter().enumerate() {
                out[y * w + x + dx] += kv * v;
            }
        }
    }
    out
}

fn extract_plane(img: &Image, channel: usize) -> Vec<f64> {
    img.data()
        .iter()
        .skip(channel)
        .step_by(3)
        .copied()
        .collect()
}

struct SsimMaps {
    mx: Vec<f64>,
    my: Vec<f64>,
    vx: Vec<f64>,
    vy: Vec<f64>,
    vxy: Vec<f64>,
}

fn ssim_maps(x: &[f64], y: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> SsimMaps {
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = conv_valid(x, w, h, k);
    let my = conv_valid(y, w, h, k);
    let mxx = conv_valid(&xx, w, h, k);
    let myy = conv_valid(&yy, w, h, k);
    let mxy = conv_valid(&xy, w, h, k);
    let n = mx.len();
    let mut vx = vec![0.0; n];
    let mut vy = vec![0.0; n];
    let mut vxy = vec![0.0; n];
    for i in 0..n {
        vx[i] = mxx[i] - mx[i] * mx[i];
        vy[i] = myy[i] - my[i] * my[i];
        vxy[i] = mxy[i] - mx[i] * my[i];
    }
    SsimMaps {
        mx,
        my,
        vx,
        vy,
        vxy,
    }
}

#[inline]
fn ssim_window_value(mx: f64, my: f64, vx: f64, vy: f64, vxy: f64) -> f64 {
    let a1 = 2.0 * mx * my + SSIM_C1;
    let a2 = 2.0 * vxy + SSIM_C2;
    let b1 = mx * mx + my * my + SSIM_C1;
    let b2 = vx + vy + SSIM_C2;
    (a1 * a2) / (b1 * b2)
}

/// Mean SSIM over channels and valid windows.
pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    check_dims(pred, gt)?;
    let (w, h) = (pred.width as usize, pred.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let k = ssim_kernel();
    let mut channel_sum = 0.0;
    for c in 0..3 {
        let x = extract_plane(pred, c);
        let y = extract_plane(gt, c);
        let maps = ssim_maps(&x, &y, w, h, &k);
        let n = maps.mx.len();
        let mut acc = 0.0;
        for i in 0..n {
            acc += ssim_window_value(maps.mx[i], maps.my[i], maps.vx[i], maps.vy[i], maps.vxy[i]);
        }
        channel_sum += acc / n as f64;
    }
    Ok(channel_sum / 3.0)
}

/// 1 - mean SSIM.
pub fn ssim_loss(pred: &Image, gt: &Image) -> Result<f64> {
    Ok(1.0 - ssim(pred, gt)?)
}

/// Gradient of `ssim_loss` w.r.t. the predicted image, times `upstream`.
pub fn ssim_loss_backward(pred: &Image, gt: &Image, upstream: f64) -> Result<Vec<f64>> {
    check_dims(pred, gt)?;
    let (w, h) = (pred.width as usize, pred.height as usize);
    let k = ssim_kernel();
    let mut grad = vec![0.0f64; w * h * 3];
    for c in 0..3 {
        let x = extract_plane(pred, c);
        let y = extract_plane(gt, c);
        let maps = ssim_maps(&x, &y, w, h, &k);
        let n = maps.mx.len();
        // d(loss)/d(ssim_window) = -upstream / (3 * n_windows)
        let u = -upstream / (3.0 * n as f64);
        let mut t_mu = vec![0.0; n];
        let mut t_vx = vec![0.0; n];
        let mut t_vxy = vec![0.0; n];
        for i in 0..n {
            let (mx, my) = (maps.mx[i], maps.my[i]);
            let a1 = 2.0 * mx * my + SSIM_C1;
            let a2 = 2.0 * maps.vxy[i] + SSIM_C2;
            let b1 = mx * mx + my * my + SSIM_C1;
            let b2 = maps.vx[i] + maps.vy[i] + SSIM_C2;
            t_mu[i] = u * 2.0 * a2 * (my * b1 - mx * a1) / (b1 * b1 * b2);
            t_vx[i] = u * (-a1 * a2) / (b1 * b2 * b2);
            t_vxy[i] = u * 2.0 * a1 / (b1 * b2);
        }
        // grad = scatter(t_mu) + 2x scatter(t_vx) - 2 scatter(t_vx mu_x)
        //        + y scatter(t_vxy) - scatter(t_vxy mu_y)
        let s_mu = scatter_valid(&t_mu, w, h, &k);
        let s_vx = scatter_valid(&t_vx, w, h, &k);
        let t_vx_mx: Vec<f64> = t_vx.iter().zip(&maps.mx).map(|(a, b)| a * b).collect();
        let s_vx_mx = scatter_valid(&t_vx_mx, w, h, &k);
        let s_vxy = scatter_valid(&t_vxy, w, h, &k);
        let t_vxy_my: Vec<f64> = t_vxy.iter().zip(&maps.my).map(|(a, b)| a * b).collect();
        let s_vxy_my = scatter_valid(&t_vxy_my, w, h, &k);
        for p in 0..w * h {
            grad[p * 3 + c] =
                s_mu[p] + 2.0 * x[p] * s_vx[p] - 2.0 * s_vx_mx[p] + y[p] * s_vxy[p] - s_vxy_my[p];
        }
    }
    Ok(grad)
}

/// Record `1 - ssim(pred, gt)` on the tape against a fixed ground truth.
pub fn ssim_loss_on_tape(tape: &mut Tape, pred: ValueId, gt: &Image) -> Result<ValueId> {
    let pred_img = Image::from_tensor(tape.value(pred))?;
    let value = ssim_loss(&pred_img, gt)?;
    let gt_owned = gt.clone();
    let backward = move |ins: &[&Tensor], _out: &Tensor, grad: &Tensor| -> Vec<Tensor> {
        let pred_img = Image::from_tensor(ins[0]).expect("ssim backward image");
        let g = ssim_loss_backward(&pred_img, &gt_owned, grad.item()).expect("ssim backward");
        vec![Tensor::new(ins[0].shape().to_vec(), g).expect("ssim grad tensor")]
    };
    tape.custom(&[pred], Tensor::scalar(value), Box::new(backward))
}

/// Record mean-absolute-error against a fixed ground truth on the tape.
pub fn l1_loss_on_tape(tape: &mut Tape, pred: ValueId, gt: &Image) -> Result<ValueId> {
    let pred_img = Image::from_tensor(tape.value(pred))?;
    let value = l1_loss(&pred_img, gt)?;
    let gt_owned = gt.clone();
    let backward = move |ins: &[&Tensor], _out: &Tensor, grad: &Tensor| -> Vec<Tensor> {
        let n = ins[0].len() as f64;
        let scale = grad.item() / n;
        let g: Vec<f64> = ins[0]
            .data()
            .iter()
            .zip(gt_owned.data())
            .map(|(a, b)| {
                let d = a - b;
                // Subgradient 0 at the kink, matching the relu convention.
                if d > 0.0 {
                    scale
                } else if d < 0.0 {
                    -scale
                } else {
                    0.0
                }
            })
            .collect();
        vec![Tensor::new(ins[0].shape().to_vec(), g).expect("l1 grad tensor")]
    };
    tape.custom(&[pred], Tensor::scalar(value), Box::new(backward))
}

/// Momentum-smoothed PSNR/SSIM for one block.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlockMetricTracker {
    pub block_id: u32,
    pub psnr_ema: f64,
    pub ssim_ema: f64,
    pub beta: f64,
    pub initialized: bool,
}

impl BlockMetricTracker {
    pub fn new(block_id: u32, beta: f64) -> Self {
        BlockMetricTracker {
            block_id,
            psnr_ema: 0.0,
            ssim_ema: 0.0,
            beta,
            initialized: false,
        }
    }

    /// First observation seeds the EMA; later ones blend with coefficient beta.
    pub fn update(&mut self, report: &MetricReport) {
        if !self.initialized {
            self.psnr_ema = report.psnr;
            self.ssim_ema = report.ssim;
            self.initialized = true;
        } else {
            self.psnr_ema = self.beta * self.psnr_ema + (1.0 - self.beta) * report.psnr;
            self.ssim_ema = self.beta * self.ssim_ema + (1.0 - self.beta) * report.ssim;
        }
    }
}
