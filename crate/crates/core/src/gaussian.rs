//! Canonical Gaussian cloud, covariance construction and color evaluation.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::real::{matmul3, sigmoid, transpose3, Mat3, Real, Vec3};
use crate::sh;

/// Learnable canonical Gaussian set. Scales are stored as logs and opacities
/// as logits so every parameter is unconstrained.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud<T = f32> {
    pub positions: Vec<Vec3<T>>,
    pub log_scales: Vec<Vec3<T>>,
    /// Unit quaternions, `(w, x, y, z)`.
    pub rotations: Vec<[T; 4]>,
    pub opacity_logits: Vec<T>,
    /// `N × 3 × B`, channel-major per Gaussian.
    pub sh_coeffs: Vec<T>,
    pub sh_degree: usize,
}

impl<T: Real> GaussianCloud<T> {
    pub fn empty(sh_degree: usize) -> Self {
        Self {
            positions: Vec::new(),
            log_scales: Vec::new(),
            rotations: Vec::new(),
            opacity_logits: Vec::new(),
            sh_coeffs: Vec::new(),
            sh_degree,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn coeffs_per_channel(&self) -> usize {
        sh::num_coeffs(self.sh_degree)
    }

    /// Checks that every attribute array agrees on N and the SH layout.
    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > sh::MAX_SH_DEGREE {
            return Err(Error::Config(format!(
                "sh degree {} exceeds maximum {}",
                self.sh_degree,
                sh::MAX_SH_DEGREE
            )));
        }
        let n = self.len();
        let nb = self.coeffs_per_channel();
        if self.log_scales.len() != n
            || self.rotations.len() != n
            || self.opacity_logits.len() != n
            || self.sh_coeffs.len() != n * 3 * nb
        {
            return Err(Error::Shape(format!(
                "cloud arrays disagree: positions {n}, scales {}, rotations {}, opacities {}, sh {} (expected {})",
                self.log_scales.len(),
                self.rotations.len(),
                self.opacity_logits.len(),
                self.sh_coeffs.len(),
                n * 3 * nb
            )));
        }
        Ok(())
    }

    /// Appends one Gaussian. `sh` must hold `3 * B` coefficients.
    pub fn push(&mut self, position: Vec3<T>, log_scale: Vec3<T>, rotation: [T; 4], opacity_logit: T, sh: &[T]) {
        debug_assert_eq!(sh.len(), 3 * self.coeffs_per_channel());
        self.positions.push(position);
        self.log_scales.push(log_scale);
        self.rotations.push(rotation);
        self.opacity_logits.push(opacity_logit);
        self.sh_coeffs.extend_from_slice(sh);
    }

    pub fn sh_of(&self, i: usize) -> &[T] {
        let w = 3 * self.coeffs_per_channel();
        &self.sh_coeffs[i * w..(i + 1) * w]
    }

    pub fn opacity(&self, i: usize) -> T {
        sigmoid(self.opacity_logits[i])
    }

    pub fn scale(&self, i: usize) -> Vec3<T> {
        self.log_scales[i].map(|s| s.exp())
    }

    /// Gathers rows by index. Duplicates are allowed; an empty index list
    /// yields an empty cloud.
    pub fn clone_subset(&self, indices: &[usize]) -> Result<Self> {
        let n = self.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        let mut out = Self::empty(self.sh_degree);
        for &i in indices {
            out.push(
                self.positions[i],
                self.log_scales[i],
                self.rotations[i],
                self.opacity_logits[i],
                self.sh_of(i),
            );
        }
        Ok(out)
    }

    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            *q = normalize_quat(q);
        }
    }

    /// View of the cloud as a time-independent snapshot (everything borrowed).
    pub fn snapshot(&self) -> DeformedSnapshot<'_, T> {
        DeformedSnapshot {
            positions: Cow::Borrowed(&self.positions),
            log_scales: Cow::Borrowed(&self.log_scales),
            rotations: Cow::Borrowed(&self.rotations),
            opacity_logits: &self.opacity_logits,
            sh_coeffs: &self.sh_coeffs,
            sh_degree: self.sh_degree,
        }
    }

    pub fn cast<U: Real>(&self) -> GaussianCloud<U> {
        let c3 = |v: &Vec3<T>| v.map(|x| U::c(x.as_f64()));
        GaussianCloud {
            positions: self.positions.iter().map(c3).collect(),
            log_scales: self.log_scales.iter().map(c3).collect(),
            rotations: self.rotations.iter().map(|q| q.map(|x| U::c(x.as_f64()))).collect(),
            opacity_logits: self.opacity_logits.iter().map(|x| U::c(x.as_f64())).collect(),
            sh_coeffs: self.sh_coeffs.iter().map(|x| U::c(x.as_f64())).collect(),
            sh_degree: self.sh_degree,
        }
    }
}

/// Per-timestep Gaussian set handed to the rasterizer. Position, scale and
/// rotation may be owned (deformed) or borrowed (canonical); opacity and SH
/// always alias the canonical cloud.
#[derive(Clone, Debug)]
pub struct DeformedSnapshot<'a, T: Clone = f32> {
    pub positions: Cow<'a, [Vec3<T>]>,
    pub log_scales: Cow<'a, [Vec3<T>]>,
    pub rotations: Cow<'a, [[T; 4]]>,
    pub opacity_logits: &'a [T],
    pub sh_coeffs: &'a [T],
    pub sh_degree: usize,
}

impl<T: Real> DeformedSnapshot<'_, T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn sh_of(&self, i: usize) -> &[T] {
        let w = 3 * sh::num_coeffs(self.sh_degree);
        &self.sh_coeffs[i * w..(i + 1) * w]
    }

    /// Owned copy of the snapshot as a plain cloud.
    pub fn to_cloud(&self) -> GaussianCloud<T> {
        GaussianCloud {
            positions: self.positions.to_vec(),
            log_scales: self.log_scales.to_vec(),
            rotations: self.rotations.to_vec(),
            opacity_logits: self.opacity_logits.to_vec(),
            sh_coeffs: self.sh_coeffs.to_vec(),
            sh_degree: self.sh_degree,
        }
    }
}

/// Symmetric 3×3 covariance of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Covariance3D<T = f32> {
    pub sigma: Mat3<T>,
}

pub fn normalize_quat<T: Real>(q: &[T; 4]) -> [T; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    q.map(|v| v / n)
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_mat<T: Real>(q: &[T; 4]) -> Mat3<T> {
    let [w, x, y, z] = *q;
    let one = T::one();
    let two = T::c(2.0);
    [
        [one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
        [two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x)],
        [two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y)],
    ]
}

/// Backpropagates `d_r` through `quat_to_mat(normalize_quat(q))`.
pub fn quat_to_mat_backward<T: Real>(q: &[T; 4], d_r: &Mat3<T>) -> [T; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    let two = T::c(2.0);
    let four = T::c(4.0);
    let zero = T::zero();
    let dw = [[zero, -two * z, two * y], [two * z, zero, -two * x], [-two * y, two * x, zero]];
    let dx = [[zero, two * y, two * z], [two * y, -four * x, -two * w], [two * z, two * w, -four * x]];
    let dy = [[-four * y, two * x, two * w], [two * x, zero, two * z], [-two * w, two * z, -four * y]];
    let dz = [[-four * z, -two * w, two * x], [two * w, -four * z, two * y], [two * x, two * y, zero]];
    let contract = |m: &Mat3<T>| {
        let mut s = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                s += m[i][j] * d_r[i][j];
            }
        }
        s
    };
    let g = [contract(&dw), contract(&dx), contract(&dy), contract(&dz)];
    let qn = [w, x, y, z];
    let proj = g[0] * qn[0] + g[1] * qn[1] + g[2] * qn[2] + g[3] * qn[3];
    [0, 1, 2, 3].map(|k| (g[k] - qn[k] * proj) / n)
}

/// `R·diag(s)·diag(s)·Rᵀ` for one Gaussian, with the quaternion normalized.
pub fn covariance<T: Real>(log_scale: &Vec3<T>, rotation: &[T; 4]) -> Mat3<T> {
    let r = quat_to_mat(&normalize_quat(rotation));
    let s = log_scale.map(|v| v.exp());
    let mut m = r;
    for row in &mut m {
        for k in 0..3 {
            row[k] *= s[k];
        }
    }
    matmul3(&m, &transpose3(&m))
}

/// Backpropagates `d_sigma` (gradient w.r.t. every entry of the full matrix)
/// into the log-scale and the raw quaternion.
pub fn covariance_backward<T: Real>(log_scale: &Vec3<T>, rotation: &[T; 4], d_sigma: &Mat3<T>) -> (Vec3<T>, [T; 4]) {
    let r = quat_to_mat(&normalize_quat(rotation));
    let s = log_scale.map(|v| v.exp());
    let mut m = r;
    for row in &mut m {
        for k in 0..3 {
            row[k] *= s[k];
        }
    }
    // sigma = M Mᵀ  =>  dM = (G + Gᵀ) M
    let mut g_sym = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            g_sym[i][j] = d_sigma[i][j] + d_sigma[j][i];
        }
    }
    let d_m = matmul3(&g_sym, &m);
    let mut d_r = [[T::zero(); 3]; 3];
    let mut d_log_s = [T::zero(); 3];
    for i in 0..3 {
        for k in 0..3 {
            d_r[i][k] = d_m[i][k] * s[k];
            d_log_s[k] += d_m[i][k] * r[i][k] * s[k];
        }
    }
    (d_log_s, quat_to_mat_backward(rotation, &d_r))
}

/// Builds every Gaussian's covariance. Rejects non-finite input, naming the
/// offending Gaussian.
pub fn build_covariance<T: Real>(log_scales: &[Vec3<T>], rotations: &[[T; 4]]) -> Result<Vec<Covariance3D<T>>> {
    if log_scales.len() != rotations.len() {
        return Err(Error::Shape(format!(
            "{} log-scales vs {} rotations",
            log_scales.len(),
            rotations.len()
        )));
    }
    log_scales
        .iter()
        .zip(rotations)
        .enumerate()
        .map(|(i, (s, q))| {
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: "log_scales", index: i });
            }
            if q.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: "rotations", index: i });
            }
            Ok(Covariance3D { sigma: covariance(s, q) })
        })
        .collect()
}

/// Evaluates view-dependent RGB for every Gaussian: `Σ c_b Y_b(dir) + 0.5`,
/// clamped below at zero.
pub fn eval_sh<T: Real>(sh_coeffs: &[T], view_dirs: &[Vec3<T>], degree: usize, coeffs_per_channel: usize) -> Result<Vec<[T; 3]>> {
    if degree > sh::MAX_SH_DEGREE || coeffs_per_channel != sh::num_coeffs(degree) {
        return Err(Error::Config(format!(
            "sh degree {degree} needs {} coefficients per channel, got {coeffs_per_channel}",
            sh::num_coeffs(degree)
        )));
    }
    let w = 3 * coeffs_per_channel;
    if sh_coeffs.len() != view_dirs.len() * w {
        return Err(Error::Shape(format!(
            "{} sh coefficients for {} directions",
            sh_coeffs.len(),
            view_dirs.len()
        )));
    }
    Ok(view_dirs
        .iter()
        .enumerate()
        .map(|(i, d)| sh::color(&sh_coeffs[i * w..(i + 1) * w], d, degree).0)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_mat_close(a: &Mat3<f64>, b: &Mat3<f64>, tol: f64) {
        for i in 0..3 {
            for j in 0..3 {
                assert!((a[i][j] - b[i][j]).abs() < tol, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn identity_covariance() {
        let c = build_covariance(&[[0.0f64; 3]], &[[1.0, 0.0, 0.0, 0.0]]).unwrap();
        assert_mat_close(&c[0].sigma, &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 1e-12);
    }

    #[test]
    fn axis_aligned_scaling() {
        let c = build_covariance(&[[2f64.ln(), 0.0, 0.0]], &[[1.0, 0.0, 0.0, 0.0]]).unwrap();
        assert_mat_close(&c[0].sigma, &[[4.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 1e-12);
    }

    #[test]
    fn rotated_scaling_matches_hand_composition() {
        // 90 degrees about z: R maps x to y.
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let q = [h, 0.0, 0.0, h];
        let r_hand = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let s = [[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let rs = matmul3(&r_hand, &s);
        let expected = matmul3(&rs, &transpose3(&rs));
        assert_mat_close(&expected, &[[1.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 1.0]], 1e-12);
        let c = build_covariance(&[[2f64.ln(), 0.0, 0.0]], &[q]).unwrap();
        assert_mat_close(&c[0].sigma, &expected, 1e-12);
    }

    #[test]
    fn non_finite_is_rejected_with_index() {
        let err = build_covariance(&[[0.0f32; 3], [f32::NAN, 0.0, 0.0]], &[[1.0, 0.0, 0.0, 0.0]; 2]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
        assert!(err.to_string().contains("gaussian 1"));
    }

    #[test]
    fn degree_zero_sh_is_constant() {
        let dc = 0.7f64;
        let dirs: Vec<Vec3<f64>> = (0..100)
            .map(|i| {
                let a = i as f64 * 0.37;
                let b = i as f64 * 0.11 - 2.0;
                let v = [a.cos() * b.cos(), a.sin() * b.cos(), b.sin()];
                let n = crate::real::norm3(&v);
                v.map(|x| x / n)
            })
            .collect();
        let coeffs: Vec<f64> = (0..100).flat_map(|_| [dc, dc, dc]).collect();
        let rgb = eval_sh(&coeffs, &dirs, 0, 1).unwrap();
        for c in &rgb {
            assert_eq!(*c, rgb[0]);
            assert!((c[0] - (sh::SH_C0 * dc + 0.5)).abs() < 1e-15);
        }
        assert!((0.282_094_791_77 * dc + 0.5 - rgb[0][0]).abs() < 1e-10);
    }

    #[test]
    fn dc_for_mid_gray() {
        let c0 = 0.0 / sh::SH_C0;
        let rgb = eval_sh(&[c0; 3], &[[0.0, 0.0, 1.0]], 0, 1).unwrap();
        assert_eq!(rgb[0], [0.5; 3]);
        let c0 = (0.5 - 0.0) / 0.282_094_791_77;
        let rgb = eval_sh(&[c0; 3], &[[1.0, 0.0, 0.0]], 0, 1).unwrap();
        assert!((rgb[0][0] - 1.0f64).abs() < 1e-10);
    }

    #[test]
    fn sh_layout_mismatch_is_config_error() {
        assert!(matches!(eval_sh(&[0.0f32; 12], &[[0.0, 0.0, 1.0]], 1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn clone_subset_cases() {
        let mut cloud = GaussianCloud::<f32>::empty(0);
        for i in 0..3 {
            let f = i as f32;
            cloud.push([f, 0.0, 0.0], [f; 3], [1.0, 0.0, 0.0, 0.0], f, &[f, f, f]);
        }
        let sub = cloud.clone_subset(&[0, 2]).unwrap();
        assert_eq!(sub.len(), 2);
        assert_eq!(sub.positions[1], [2.0, 0.0, 0.0]);
        assert_eq!(sub.sh_of(1), &[2.0, 2.0, 2.0]);
        sub.validate().unwrap();
        assert_eq!(cloud.clone_subset(&[]).unwrap().len(), 0);
        let dup = cloud.clone_subset(&[1, 1]).unwrap();
        assert_eq!(dup.opacity_logits, vec![1.0, 1.0]);
        let err = cloud.clone_subset(&[0, 3]).unwrap_err();
        assert!(err.to_string().contains("index 3"));
    }

    #[test]
    fn covariance_backward_matches_finite_differences() {
        let ls = [0.1f64, -0.4, 0.3];
        let q = [0.8, 0.3, -0.2, 0.4];
        let w = [[0.3, -1.2, 0.5], [0.7, 0.2, -0.1], [1.1, 0.4, -0.6]];
        let f = |ls: &Vec3<f64>, q: &[f64; 4]| {
            let s = covariance(ls, q);
            let mut acc = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    acc += s[i][j] * w[i][j];
                }
            }
            acc
        };
        let (dls, dq) = covariance_backward(&ls, &q, &w);
        let h = 1e-6;
        for k in 0..3 {
            let (mut p, mut m) = (ls, ls);
            p[k] += h;
            m[k] -= h;
            let fd = (f(&p, &q) - f(&m, &q)) / (2.0 * h);
            assert!((fd - dls[k]).abs() < 1e-7, "scale {k}: {fd} vs {}", dls[k]);
        }
        for k in 0..4 {
            let (mut p, mut m) = (q, q);
            p[k] += h;
            m[k] -= h;
            let fd = (f(&ls, &p) - f(&ls, &m)) / (2.0 * h);
            assert!((fd - dq[k]).abs() < 1e-7, "quat {k}: {fd} vs {}", dq[k]);
        }
    }

    fn sym_eigenvalues(a: &Mat3<f64>) -> [f64; 3] {
        // Jacobi sweeps; independent of the factorization under test.
        let mut m = *a;
        for _ in 0..50 {
            for (p, q) in [(0, 1), (0, 2), (1, 2)] {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let mut j = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
                j[p][p] = c;
                j[q][q] = c;
                j[p][q] = s;
                j[q][p] = -s;
                m = matmul3(&matmul3(&transpose3(&j), &m), &j);
            }
        }
        let mut e = [m[0][0], m[1][1], m[2][2]];
        e.sort_by(|a, b| a.partial_cmp(b).unwrap());
        e
    }

    proptest! {
        #[test]
        fn eigenvalues_recover_squared_scales(
            w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0,
            s0 in -1.0f64..1.0, s1 in -1.0f64..1.0, s2 in -1.0f64..1.0,
        ) {
            let n = (w * w + x * x + y * y + z * z).sqrt();
            prop_assume!(n > 1e-3);
            let q = [w / n, x / n, y / n, z / n];
            let ls = [s0, s1, s2];
            let sigma = build_covariance(&[ls], &[q]).unwrap()[0].sigma;
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!((sigma[i][j] - sigma[j][i]).abs() < 1e-12);
                }
            }
            let eig = sym_eigenvalues(&sigma);
            let mut expect = ls.map(|v| (2.0 * v).exp());
            expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for k in 0..3 {
                prop_assert!(eig[k] >= -1e-9);
                prop_assert!((eig[k] - expect[k]).abs() < 1e-6, "{eig:?} vs {expect:?}");
            }
        }

        #[test]
        fn opacity_activation_is_monotone(a in -20.0f64..20.0, d in 0.0f64..5.0) {
            prop_assert!(sigmoid(a + d) >= sigmoid(a));
        }
    }
}
