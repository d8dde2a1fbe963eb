use crate::error::{Error, Result};

use super::image::ImageF64;

/// Peak signal-to-noise ratio in dB on [0,1] images:
/// `10·log10(1/MSE)`, capped at 120 dB once MSE drops below 1e-12.
pub fn psnr(pred: &ImageF64, gt: &ImageF64) -> Result<f64> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::dim(format!(
            "psnr shape mismatch: {}x{} vs {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let mut mse = 0.0;
    for (a, b) in pred.pixels.iter().zip(&gt.pixels) {
        for c in 0..3 {
            let d = a[c] - b[c];
            mse += d * d;
        }
    }
    mse /= (pred.pixels.len() * 3) as f64;
    if mse < 1e-12 {
        return Ok(120.0);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Single-scale SSIM with an 11x11 Gaussian window (σ = 1.5), evaluated on
/// windows fully inside the frame, per channel and then averaged.
pub fn ssim(a: &ImageF64, b: &ImageF64) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::dim(format!(
            "ssim shape mismatch: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::dim(format!(
            "ssim requires images at least {SSIM_WINDOW} pixels per side, got {}x{}",
            a.width, a.height
        )));
    }
    let w1d = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (w, h) = (a.width, a.height);
    let half = SSIM_WINDOW / 2;

    let mut total = 0.0;
    for ch in 0..3 {
        let mut acc = 0.0;
        let mut count = 0usize;
        for cy in half..h - half {
            for cx in half..w - half {
                let (mut mx, mut my) = (0.0, 0.0);
                let (mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    let y = cy + dy - half;
                    for dx in 0..SSIM_WINDOW {
                        let x = cx + dx - half;
                        let wgt = w1d[dy] * w1d[dx];
                        let va = a.px(x, y)[ch];
                        let vb = b.px(x, y)[ch];
                        mx += wgt * va;
                        my += wgt * vb;
                        mxx += wgt * va * va;
                        myy += wgt * vb * vb;
                        mxy += wgt * va * vb;
                    }
                }
                let vx = mxx - mx * mx;
                let vy = myy - my * my;
                let cov = mxy - mx * my;
                let val = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                acc += val;
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    Ok(total / 3.0)
}
