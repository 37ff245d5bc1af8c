//! PSNR and SSIM for frames with values in `[0,1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{rgb_to_y, Frame};
use crate::tensor::gaussian_kernel_1d;

/// Reported PSNR for identical inputs.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn same_dims(a: &Frame, b: &Frame) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("metric inputs {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn mse(a: &Frame, b: &Frame) -> Result<f64> {
    same_dims(a, b)?;
    let s: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.as_slice().len().max(1) as f64)
}

/// `10·log10(1/mse)` over all channels, capped at [`PSNR_CAP`].
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Valid-mode separable Gaussian filter of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (i, &kv) in k.iter().enumerate() {
            let src = &tmp[(y + i) * ow..(y + i + 1) * ow];
            for (o, &s) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                *o += kv * s;
            }
        }
    }
    (out, oh, ow)
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, k: &[f64]) -> f64 {
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let (mu_a, oh, ow) = filter_valid(a, h, w, k);
    let (mu_b, _, _) = filter_valid(b, h, w, k);
    let (aa, _, _) = filter_valid(&prod(&|x, _| x * x), h, w, k);
    let (bb, _, _) = filter_valid(&prod(&|_, y| y * y), h, w, k);
    let (ab, _, _) = filter_valid(&prod(&|x, y| x * y), h, w, k);
    let mut total = 0.0;
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
    }
    total / (oh * ow) as f64
}

/// Mean SSIM over every fully contained 11×11 Gaussian (σ=1.5) window,
/// averaged over channels; dynamic range 1.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w, c) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let k = gaussian_kernel_1d(SSIM_SIGMA, SSIM_WINDOW / 2);
    let n = h * w;
    let (sa, sb) = (a.as_slice(), b.as_slice());
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = sa[ch * n..(ch + 1) * n].iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = sb[ch * n..(ch + 1) * n].iter().map(|&v| v as f64).collect();
        total += ssim_plane(&pa, &pb, h, w, &k);
    }
    Ok(total / c as f64)
}

/// PSNR/SSIM on luma and on RGB.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricRecord {
    pub psnr_y: f64,
    pub ssim_y: f64,
    pub psnr_rgb: f64,
    pub ssim_rgb: f64,
}

impl MetricRecord {
    /// Arithmetic mean of `records`.
    pub fn mean<'a>(records: impl IntoIterator<Item = &'a MetricRecord>) -> MetricRecord {
        let mut acc = MetricRecord::default();
        let mut n = 0usize;
        for r in records {
            acc.psnr_y += r.psnr_y;
            acc.ssim_y += r.ssim_y;
            acc.psnr_rgb += r.psnr_rgb;
            acc.ssim_rgb += r.ssim_rgb;
            n += 1;
        }
        if n > 0 {
            let k = n as f64;
            acc.psnr_y /= k;
            acc.ssim_y /= k;
            acc.psnr_rgb /= k;
            acc.ssim_rgb /= k;
        }
        acc
    }
}

/// All four metrics for one RGB frame pair after clipping the prediction to
/// `[0,1]` and cropping `border` pixels from every edge.
pub fn frame_metrics(pred: &Frame, gt: &Frame, border: usize) -> Result<MetricRecord> {
    same_dims(pred, gt)?;
    let (h, w, _) = pred.dims();
    if 2 * border >= h || 2 * border >= w {
        return Err(Error::shape(format!("border {border} leaves nothing of a {h}x{w} frame")));
    }
    let (ch, cw) = (h - 2 * border, w - 2 * border);
    let p = pred.clamp01().crop(border, border, ch, cw)?;
    let g = gt.clamp01().crop(border, border, ch, cw)?;
    let (py, gy) = (rgb_to_y(&p)?, rgb_to_y(&g)?);
    Ok(MetricRecord {
        psnr_y: psnr(&py, &gy)?,
        ssim_y: ssim(&py, &gy)?,
        psnr_rgb: psnr(&p, &g)?,
        ssim_rgb: ssim(&p, &g)?,
    })
}
