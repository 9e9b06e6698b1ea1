//! PSNR and SSIM on `[0, 1]` RGB images.

use crate::error::{Error, Result};

fn check(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} values", a.len(), b.len())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio with peak 1; identical inputs give `+inf`.
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    check(a, b)?;
    let mse = a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len().max(1) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter over "valid" positions only.
fn filter(img: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM over channels and valid window positions (11×11 Gaussian
/// window, σ = 1.5, data range 1). Images smaller than the window are
/// compared with a single global window.
pub fn ssim(a: &[f32], b: &[f32], width: usize, height: usize, channels: usize) -> Result<f64> {
    check(a, b)?;
    if a.len() != width * height * channels {
        return Err(Error::Shape(format!("{} values for {width}×{height}×{channels}", a.len())));
    }
    let (c1, c2) = (K1 * K1, K2 * K2);
    let k = gaussian_kernel();
    let mut total = 0.0;
    for c in 0..channels {
        let x: Vec<f64> = (0..width * height).map(|i| a[i * channels + c] as f64).collect();
        let y: Vec<f64> = (0..width * height).map(|i| b[i * channels + c] as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let moments: Vec<Vec<f64>> = if width >= SSIM_WINDOW && height >= SSIM_WINDOW {
            [&x, &y, &xx, &yy, &xy].iter().map(|m| filter(m, width, height, &k).0).collect()
        } else {
            let n = (width * height) as f64;
            [&x, &y, &xx, &yy, &xy].iter().map(|m| vec![m.iter().sum::<f64>() / n]).collect()
        };
        let count = moments[0].len();
        let mut s = 0.0;
        for i in 0..count {
            let (mx, my) = (moments[0][i], moments[1][i]);
            let vx = moments[2][i] - mx * mx;
            let vy = moments[3][i] - my * my;
            let cov = moments[4][i] - mx * my;
            s += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
        total += s / count as f64;
    }
    Ok(total / channels as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Vec<f32> {
        (0..w * h * 3).map(|i| ((i * 37) % 101) as f32 / 200.0 + 0.2).collect()
    }

    #[test]
    fn identical_images() {
        let a = ramp(16, 16);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!((ssim(&a, &a, 16, 16, 3).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_offset_is_twenty_db() {
        let a = ramp(16, 16);
        let b: Vec<f32> = a.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
    }

    #[test]
    fn ssim_penalizes_noise_and_is_symmetric() {
        let a = ramp(20, 14);
        let b: Vec<f32> = a.iter().enumerate().map(|(i, v)| v + if i % 2 == 0 { 0.05 } else { -0.05 }).collect();
        let s = ssim(&a, &b, 20, 14, 3).unwrap();
        assert!(s < 0.99 && s > 0.0);
        assert!((s - ssim(&b, &a, 20, 14, 3).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((k[0] - k[10]).abs() < 1e-15 && k[5] > k[4]);
    }
}
