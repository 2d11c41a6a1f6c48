//! PSNR, SSIM and MAE on single-channel images.
//!
//! SSIM follows the usual Gaussian-window convention: 11×11 window,
//! σ = 1.5, K1 = 0.01, K2 = 0.03, population statistics, mean over all
//! window positions that fit entirely inside the image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// How the peak value for PSNR/SSIM is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataRange {
    /// `max(gt) - min(gt)` of each reference image; 1.0 if the reference is flat.
    #[default]
    PerImage,
    Fixed { value: f64 },
}

impl DataRange {
    pub fn resolve<T: Real>(&self, gt: &[T]) -> f64 {
        match *self {
            DataRange::Fixed { value } => value,
            DataRange::PerImage => {
                let (lo, hi) = gt.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    let v = v.as_f64();
                    (lo.min(v), hi.max(v))
                });
                let r = hi - lo;
                if r > 0.0 {
                    r
                } else {
                    1.0
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    /// `+inf` when the prediction is exact.
    pub psnr_db: f64,
    pub ssim: f64,
    pub mae: f64,
    pub data_range: f64,
}

impl MetricResult {
    pub fn ssim_pct(&self) -> f64 {
        100.0 * self.ssim
    }
}

fn check_pair<T>(pred: &[T], gt: &[T]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, reference {}",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::Shape("empty image".into()));
    }
    Ok(())
}

pub fn mse<T: Real>(pred: &[T], gt: &[T]) -> Result<f64> {
    check_pair(pred, gt)?;
    let s: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let d = p.as_f64() - g.as_f64();
            d * d
        })
        .sum();
    Ok(s / gt.len() as f64)
}

pub fn psnr<T: Real>(pred: &[T], gt: &[T], data_range: f64) -> Result<f64> {
    if !(data_range.is_finite() && data_range > 0.0) {
        return Err(Error::InvalidArgument(format!("data_range must be > 0, got {data_range}")));
    }
    let m = mse(pred, gt)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

pub fn mae<T: Real>(pred: &[T], gt: &[T]) -> Result<f64> {
    check_pair(pred, gt)?;
    let s: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p.as_f64() - g.as_f64()).abs())
        .sum();
    Ok(s / gt.len() as f64)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" Gaussian filtering; output is `(h-10)×(w-10)`.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let oh = h - SSIM_WINDOW + 1;
    let ow = w - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        let src = &img[i * w..(i + 1) * w];
        for j in 0..ow {
            rows[i * ow + j] = k.iter().zip(&src[j..j + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..SSIM_WINDOW).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

pub fn ssim<T: Real>(pred: &[T], gt: &[T], height: usize, width: usize, data_range: f64) -> Result<f64> {
    check_pair(pred, gt)?;
    if pred.len() != height * width {
        return Err(Error::Shape(format!(
            "{} pixels for a {height}x{width} image",
            pred.len()
        )));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "{height}x{width} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    if !(data_range.is_finite() && data_range > 0.0) {
        return Err(Error::InvalidArgument(format!("data_range must be > 0, got {data_range}")));
    }
    let x: Vec<f64> = pred.iter().map(|v| v.as_f64()).collect();
    let y: Vec<f64> = gt.iter().map(|v| v.as_f64()).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let k = gaussian_window();
    let mx = filter_valid(&x, height, width, &k);
    let my = filter_valid(&y, height, width, &k);
    let mxx = filter_valid(&xx, height, width, &k);
    let myy = filter_valid(&yy, height, width, &k);
    let mxy = filter_valid(&xy, height, width, &k);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// All three metrics with the data range picked from `range`.
pub fn evaluate_pair<T: Real>(
    pred: &[T],
    gt: &[T],
    height: usize,
    width: usize,
    range: DataRange,
) -> Result<MetricResult> {
    let data_range = range.resolve(gt);
    Ok(MetricResult {
        psnr_db: psnr(pred, gt, data_range)?,
        ssim: ssim(pred, gt, height, width, data_range)?,
        mae: mae(pred, gt)?,
        data_range,
    })
}
