use image::RgbImage;

use super::EvalError;
use crate::mask::Mask;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: u32 = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const DYNAMIC_RANGE: f64 = 255.0;

fn same_dims(a: &RgbImage, b: &RgbImage) -> Result<(), EvalError> {
    if a.dimensions() != b.dimensions() {
        return Err(EvalError::ShapeMismatch {
            a: a.dimensions(),
            b: b.dimensions(),
        });
    }
    Ok(())
}

fn psnr_from(sum_sq: f64, n: usize, peak: f64) -> f64 {
    let mse = sum_sq / n as f64;
    if mse < 1e-12 {
        PSNR_CAP
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
    }
}

/// PSNR in dB over all pixels and channels.
pub fn psnr(a: &RgbImage, b: &RgbImage, peak: f64) -> Result<f64, EvalError> {
    same_dims(a, b)?;
    let sum: f64 = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum();
    Ok(psnr_from(sum, a.as_raw().len(), peak))
}

/// PSNR over the occluded pixels only.
pub fn psnr_masked(a: &RgbImage, b: &RgbImage, mask: &Mask, peak: f64) -> Result<f64, EvalError> {
    same_dims(a, b)?;
    if mask.dims() != a.dimensions() {
        return Err(EvalError::ShapeMismatch {
            a: a.dimensions(),
            b: mask.dims(),
        });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, y, pa) in a.enumerate_pixels() {
        if mask.get(x, y) {
            let pb = b.get_pixel(x, y);
            for c in 0..3 {
                sum += (f64::from(pa[c]) - f64::from(pb[c])).powi(2);
            }
            n += 3;
        }
    }
    if n == 0 {
        return Err(EvalError::EmptyMask);
    }
    Ok(psnr_from(sum, n, peak))
}

/// Luma with BT.601 weights, unrounded.
pub fn to_luma(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|p| 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]))
        .collect()
}

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as i32;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-(f64::from(i * i)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a `w × h` plane.
fn filter(plane: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let n = kernel.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| kernel[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| kernel[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Local SSIM values, one per window position.
fn ssim_map(a: &RgbImage, b: &RgbImage) -> Result<(Vec<f64>, usize, usize), EvalError> {
    same_dims(a, b)?;
    let (w, h) = a.dimensions();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(EvalError::TooSmall {
            w,
            h,
            window: SSIM_WINDOW,
        });
    }
    let (x, y) = (to_luma(a), to_luma(b));
    let (w, h) = (w as usize, h as usize);
    let k = gaussian_kernel();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_x = filter(&x, w, h, &k);
    let mu_y = filter(&y, w, h, &k);
    let xx = filter(&prod(&x, &x), w, h, &k);
    let yy = filter(&prod(&y, &y), w, h, &k);
    let xy = filter(&prod(&x, &y), w, h, &k);
    let c1 = (K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (K2 * DYNAMIC_RANGE).powi(2);
    let map = (0..mu_x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .collect();
    let ow = w - SSIM_WINDOW as usize + 1;
    let oh = h - SSIM_WINDOW as usize + 1;
    Ok((map, ow, oh))
}

/// Mean SSIM over all window positions, on luma.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64, EvalError> {
    let (map, _, _) = ssim_map(a, b)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// Mean SSIM over windows centred on occluded pixels.
pub fn ssim_masked(a: &RgbImage, b: &RgbImage, mask: &Mask) -> Result<f64, EvalError> {
    let (map, ow, oh) = ssim_map(a, b)?;
    if mask.dims() != a.dimensions() {
        return Err(EvalError::ShapeMismatch {
            a: a.dimensions(),
            b: mask.dims(),
        });
    }
    let r = SSIM_WINDOW / 2;
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..oh {
        for x in 0..ow {
            if mask.get(x as u32 + r, y as u32 + r) {
                sum += map[y * ow + x];
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(EvalError::EmptyMask);
    }
    Ok(sum / n as f64)
}
