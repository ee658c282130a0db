//! PSNR and single-scale SSIM for images in `[0, 1]`.

use crate::error::{FlowError, Result};
use crate::tensor::{mse, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    /// Decibels; `+inf` for identical inputs.
    pub psnr: f64,
    /// `None` for inputs that are not images of at least 11x11 pixels.
    pub ssim: Option<f64>,
    pub mse: f64,
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub fn psnr(x: &Tensor, reference: &Tensor, peak: f64) -> Result<f64> {
    x.ensure_shape(reference.shape(), "psnr input")?;
    Ok(psnr_from_mse(mse(x.data(), reference.data()), peak))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

fn ssim_plane(x: &[f64], r: &[f64], h: usize, w: usize) -> f64 {
    let g = gaussian_window();
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for i in 0..oh {
        for j in 0..ow {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for a in 0..SSIM_WINDOW {
                for b in 0..SSIM_WINDOW {
                    let wgt = g[a] * g[b];
                    let p = x[(i + a) * w + j + b];
                    let q = r[(i + a) * w + j + b];
                    mx += wgt * p;
                    my += wgt * q;
                    xx += wgt * p * p;
                    yy += wgt * q * q;
                    xy += wgt * p * q;
                }
            }
            let vx = xx - mx * mx;
            let vy = yy - my * my;
            let cxy = xy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    total / (oh * ow) as f64
}

/// Mean SSIM over valid (unpadded) windows; `[C, H, W]` inputs average the channels.
pub fn ssim(x: &Tensor, reference: &Tensor) -> Result<f64> {
    x.ensure_shape(reference.shape(), "ssim input")?;
    let (c, h, w) = match *x.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(FlowError::shape(format!("ssim needs [H, W] or [C, H, W], got {:?}", x.shape()))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(FlowError::shape(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let plane = h * w;
    let sum: f64 = (0..c)
        .map(|k| ssim_plane(&x.data()[k * plane..(k + 1) * plane], &reference.data()[k * plane..(k + 1) * plane], h, w))
        .sum();
    Ok(sum / c as f64)
}

pub fn evaluate(x: &Tensor, reference: &Tensor) -> Result<MetricReport> {
    x.ensure_shape(reference.shape(), "metric input")?;
    let m = mse(x.data(), reference.data());
    let ssim = match ssim(x, reference) {
        Ok(v) => Some(v),
        Err(FlowError::Shape(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricReport {
        psnr: psnr_from_mse(m, 1.0),
        ssim,
        mse: m,
    })
}
