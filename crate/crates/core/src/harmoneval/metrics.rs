//! Full-reference image metrics on `[0, 1]` images.

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// PSNR reported for (near-)exact matches.
pub const PSNR_CAP_DB: f64 = 99.0;
const MSE_FLOOR: f64 = 1e-10;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sum / a.data.len() as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// MSE restricted to pixels where `mask > 0.5`.
pub fn masked_mse(a: &Image, b: &Image, mask: &Mask) -> Result<f64> {
    a.ensure_same_shape(b)?;
    if mask.width != a.width || mask.height != a.height || mask.channels != 1 {
        return Err(Error::shape((a.width, a.height, 1), (mask.width, mask.height, mask.channels)));
    }
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (i, &m) in mask.data.iter().enumerate() {
        if m > 0.5 {
            for k in 0..a.channels {
                let j = i * a.channels + k;
                sum += (a.data[j] as f64 - b.data[j] as f64).powi(2);
            }
            n += a.channels;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum / n as f64)
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" Gaussian filter of one channel.
fn filter_valid(plane: &[f64], w: usize, h: usize, win: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = win.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| win[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| win[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Structural similarity with a Gaussian window, averaged over all valid
/// window positions and channels. Images smaller than the window use the
/// largest odd window that fits.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (w, h, ch) = (a.width, a.height, a.channels);
    let mut size = SSIM_WINDOW.min(w).min(h);
    if size % 2 == 0 {
        size -= 1;
    }
    if size == 0 {
        return Err(Error::InvalidInput("empty image".into()));
    }
    let win = gaussian_window(size);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..ch {
        let pa: Vec<f64> = (0..w * h).map(|i| a.data[i * ch + k] as f64).collect();
        let pb: Vec<f64> = (0..w * h).map(|i| b.data[i * ch + k] as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let (mu_a, ..) = filter_valid(&pa, w, h, &win);
        let (mu_b, ..) = filter_valid(&pb, w, h, &win);
        let (e_aa, ..) = filter_valid(&prod(&pa, &pa), w, h, &win);
        let (e_bb, ..) = filter_valid(&prod(&pb, &pb), w, h, &win);
        let (e_ab, ..) = filter_valid(&prod(&pa, &pb), w, h, &win);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
