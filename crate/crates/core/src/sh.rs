//! Real spherical-harmonics basis up to degree 3, with analytic derivatives
//! of each basis function with respect to the (unit) view direction.

use crate::real::{Real, Vec3};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const MAX_SH_DEGREE: usize = 3;

/// Number of coefficients per color channel for `degree`.
pub const fn num_coeffs(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Offset added to the reconstructed color before clamping at zero.
pub const COLOR_OFFSET: f64 = 0.5;

/// Evaluates the first `num_coeffs(degree)` basis functions at `d`.
pub fn basis<T: Real>(d: &Vec3<T>, degree: usize, out: &mut [T]) {
    let c = T::c;
    let [x, y, z] = *d;
    out[0] = c(SH_C0);
    if degree < 1 {
        return;
    }
    out[1] = -c(SH_C1) * y;
    out[2] = c(SH_C1) * z;
    out[3] = -c(SH_C1) * x;
    if degree < 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[4] = c(SH_C2[0]) * x * y;
    out[5] = c(SH_C2[1]) * y * z;
    out[6] = c(SH_C2[2]) * (c(2.0) * zz - xx - yy);
    out[7] = c(SH_C2[3]) * x * z;
    out[8] = c(SH_C2[4]) * (xx - yy);
    if degree < 3 {
        return;
    }
    out[9] = c(SH_C3[0]) * y * (c(3.0) * xx - yy);
    out[10] = c(SH_C3[1]) * x * y * z;
    out[11] = c(SH_C3[2]) * y * (c(4.0) * zz - xx - yy);
    out[12] = c(SH_C3[3]) * z * (c(2.0) * zz - c(3.0) * xx - c(3.0) * yy);
    out[13] = c(SH_C3[4]) * x * (c(4.0) * zz - xx - yy);
    out[14] = c(SH_C3[5]) * z * (xx - yy);
    out[15] = c(SH_C3[6]) * x * (xx - c(3.0) * yy);
}

/// Gradient of each basis function with respect to the direction components.
pub fn basis_grad<T: Real>(d: &Vec3<T>, degree: usize, out: &mut [Vec3<T>]) {
    let c = T::c;
    let zero = T::zero();
    let [x, y, z] = *d;
    out[0] = [zero; 3];
    if degree < 1 {
        return;
    }
    let k = c(SH_C1);
    out[1] = [zero, -k, zero];
    out[2] = [zero, zero, k];
    out[3] = [-k, zero, zero];
    if degree < 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let k = SH_C2.map(c);
    out[4] = [k[0] * y, k[0] * x, zero];
    out[5] = [zero, k[1] * z, k[1] * y];
    out[6] = [-c(2.0) * k[2] * x, -c(2.0) * k[2] * y, c(4.0) * k[2] * z];
    out[7] = [k[3] * z, zero, k[3] * x];
    out[8] = [c(2.0) * k[4] * x, -c(2.0) * k[4] * y, zero];
    if degree < 3 {
        return;
    }
    let k = SH_C3.map(c);
    out[9] = [c(6.0) * k[0] * x * y, k[0] * (c(3.0) * xx - c(3.0) * yy), zero];
    out[10] = [k[1] * y * z, k[1] * x * z, k[1] * x * y];
    out[11] = [
        -c(2.0) * k[2] * x * y,
        k[2] * (c(4.0) * zz - xx - c(3.0) * yy),
        c(8.0) * k[2] * y * z,
    ];
    out[12] = [
        -c(6.0) * k[3] * x * z,
        -c(6.0) * k[3] * y * z,
        k[3] * (c(6.0) * zz - c(3.0) * xx - c(3.0) * yy),
    ];
    out[13] = [
        k[4] * (c(4.0) * zz - c(3.0) * xx - yy),
        -c(2.0) * k[4] * x * y,
        c(8.0) * k[4] * x * z,
    ];
    out[14] = [c(2.0) * k[5] * x * z, -c(2.0) * k[5] * y * z, k[5] * (xx - yy)];
    out[15] = [k[6] * (c(3.0) * xx - c(3.0) * yy), -c(6.0) * k[6] * x * y, zero];
}

/// Color of one Gaussian seen along `dir`. `coeffs` holds `3 * B` values,
/// channel-major. Returns `(clamped, raw)` where `raw` excludes the clamp.
pub fn color<T: Real>(coeffs: &[T], dir: &Vec3<T>, degree: usize) -> ([T; 3], [T; 3]) {
    let nb = num_coeffs(degree);
    let mut b = [T::zero(); 16];
    basis(dir, degree, &mut b);
    let mut raw = [T::zero(); 3];
    for (ch, r) in raw.iter_mut().enumerate() {
        let cs = &coeffs[ch * nb..(ch + 1) * nb];
        *r = cs.iter().zip(&b[..nb]).map(|(&a, &y)| a * y).sum::<T>() + T::c(COLOR_OFFSET);
    }
    (raw.map(|v| v.max(T::zero())), raw)
}

/// Backpropagates `d_color` (gradient w.r.t. the clamped color) into the
/// coefficients (`d_coeffs`, accumulated) and returns the gradient w.r.t. `dir`.
pub fn color_backward<T: Real>(
    dir: &Vec3<T>,
    degree: usize,
    coeffs: &[T],
    raw: &[T; 3],
    d_color: &[T; 3],
    d_coeffs: &mut [T],
) -> Vec3<T> {
    let nb = num_coeffs(degree);
    let mut b = [T::zero(); 16];
    basis(dir, degree, &mut b);
    let mut db = [[T::zero(); 3]; 16];
    if degree > 0 {
        basis_grad(dir, degree, &mut db);
    }
    let mut d_dir = [T::zero(); 3];
    for ch in 0..3 {
        if raw[ch] < T::zero() {
            continue;
        }
        let g = d_color[ch];
        for k in 0..nb {
            d_coeffs[ch * nb + k] += g * b[k];
            if k > 0 {
                let w = g * coeffs[ch * nb + k];
                for a in 0..3 {
                    d_dir[a] += w * db[k][a];
                }
            }
        }
    }
    d_dir
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_grad_matches_finite_differences() {
        let d = [0.3f64, -0.5, 0.7];
        let mut g = [[0.0; 3]; 16];
        basis_grad(&d, 3, &mut g);
        let h = 1e-6;
        for axis in 0..3 {
            let mut dp = d;
            let mut dm = d;
            dp[axis] += h;
            dm[axis] -= h;
            let mut bp = [0.0; 16];
            let mut bm = [0.0; 16];
            basis(&dp, 3, &mut bp);
            basis(&dm, 3, &mut bm);
            for k in 0..16 {
                let fd = (bp[k] - bm[k]) / (2.0 * h);
                assert!((fd - g[k][axis]).abs() < 1e-7, "basis {k} axis {axis}: {fd} vs {}", g[k][axis]);
            }
        }
    }

    #[test]
    fn band_one_z_difference() {
        // single nonzero coefficient on the z-aligned band-1 function
        let c = 0.2f64;
        let mut coeffs = vec![0.0; 12];
        coeffs[2] = c;
        let (up, _) = color(&coeffs, &[0.0, 0.0, 1.0], 1);
        let (down, _) = color(&coeffs, &[0.0, 0.0, -1.0], 1);
        assert!(((up[0] - down[0]) - 2.0 * c * SH_C1).abs() < 1e-12);
        assert!((2.0 * c * 0.488_602_511_9 - (up[0] - down[0])).abs() < 1e-10);
    }

    #[test]
    fn clamp_blocks_gradient() {
        let coeffs = vec![-10.0f64, 0.0, 0.0];
        let (c, raw) = color(&coeffs, &[0.0, 0.0, 1.0], 0);
        assert_eq!(c[0], 0.0);
        let mut dc = vec![0.0; 3];
        color_backward(&[0.0, 0.0, 1.0], 0, &coeffs, &raw, &[1.0, 1.0, 1.0], &mut dc);
        assert_eq!(dc[0], 0.0);
        assert!((dc[1] - SH_C0).abs() < 1e-15);
    }
}
