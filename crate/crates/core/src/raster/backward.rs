use super::forward::{composite_pixel, tile_bounds, Hit};
use super::{CamParams, RenderOutput, Splat};
use crate::gaussian::{covariance, covariance_backward, DeformedSnapshot};
use crate::par;
use crate::real::{matmul3, matvec3_t, transpose3, Mat3, Real, Vec3};
use crate::sh;

/// Gradients w.r.t. every attribute of a snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotGrads<T = f32> {
    pub positions: Vec<Vec3<T>>,
    pub log_scales: Vec<Vec3<T>>,
    pub rotations: Vec<[T; 4]>,
    pub opacity_logits: Vec<T>,
    pub sh_coeffs: Vec<T>,
}

impl<T: Real> SnapshotGrads<T> {
    pub fn zeros(n: usize, coeffs_per_gaussian: usize) -> Self {
        Self {
            positions: vec![[T::zero(); 3]; n],
            log_scales: vec![[T::zero(); 3]; n],
            rotations: vec![[T::zero(); 4]; n],
            opacity_logits: vec![T::zero(); n],
            sh_coeffs: vec![T::zero(); n * coeffs_per_gaussian],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &Self) {
        fn add<T: Real, const K: usize>(a: &mut [[T; K]], b: &[[T; K]]) {
            for (x, y) in a.iter_mut().zip(b) {
                for k in 0..K {
                    x[k] += y[k];
                }
            }
        }
        add(&mut self.positions, &other.positions);
        add(&mut self.log_scales, &other.log_scales);
        add(&mut self.rotations, &other.rotations);
        for (x, y) in self.opacity_logits.iter_mut().zip(&other.opacity_logits) {
            *x += *y;
        }
        for (x, y) in self.sh_coeffs.iter_mut().zip(&other.sh_coeffs) {
            *x += *y;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.positions.iter().flatten().all(|v| v.is_finite())
            && self.log_scales.iter().flatten().all(|v| v.is_finite())
            && self.rotations.iter().flatten().all(|v| v.is_finite())
            && self.opacity_logits.iter().all(|v| v.is_finite())
            && self.sh_coeffs.iter().all(|v| v.is_finite())
    }
}

/// Screen-space gradients of one splat.
#[derive(Clone, Copy, Debug, Default)]
struct Grad2D<T> {
    mean: [T; 2],
    /// w.r.t. the conic scalars `(a, b, c)` of `a dx² + 2b dx dy + c dy²`
    conic: [T; 3],
    opacity: T,
    color: [T; 3],
}

impl<T: Real> Grad2D<T> {
    fn add(&mut self, o: &Self) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

fn zero_grad2d<T: Real>() -> Grad2D<T> {
    Grad2D {
        mean: [T::zero(); 2],
        conic: [T::zero(); 3],
        opacity: T::zero(),
        color: [T::zero(); 3],
    }
}

/// Backpropagates image-space gradients through the recorded forward pass.
///
/// `d_rgb` is `H × W × 3` and `d_alpha` is `H × W` (either may be empty to
/// mean zero). Fills `output.screen_grad_norm` with the per-Gaussian norm of
/// the gradient w.r.t. the 2D mean, in pixels.
pub fn render_backward<T: Real>(
    snapshot: &DeformedSnapshot<'_, T>,
    output: &mut RenderOutput<T>,
    d_rgb: &[T],
    d_alpha: &[T],
) -> SnapshotGrads<T> {
    let rec = &output.record;
    let (width, height) = (output.width, output.height);
    let n = snapshot.len();
    assert_eq!(rec.splats.len(), n, "snapshot does not match the recorded forward pass");
    assert!(d_rgb.is_empty() || d_rgb.len() == width * height * 3);
    assert!(d_alpha.is_empty() || d_alpha.len() == width * height);
    let splats = &rec.splats;
    let bg = rec.background;

    // Per-tile partial gradients, aligned with each tile's list, merged below
    // in tile order so the sum never depends on scheduling.
    let partials = par::map_range(rec.tile_lists.len(), |tile| {
        let list = &rec.tile_lists[tile];
        let mut acc = vec![zero_grad2d::<T>(); list.len()];
        if list.is_empty() {
            return acc;
        }
        let (x0, y0, x1, y1) = tile_bounds(tile, rec.tiles_x, width, height);
        let mut hits: Vec<Hit<T>> = Vec::with_capacity(list.len());
        for y in y0..y1 {
            for x in x0..x1 {
                let pix = y * width + x;
                let dc: [T; 3] = if d_rgb.is_empty() {
                    [T::zero(); 3]
                } else {
                    [d_rgb[pix * 3], d_rgb[pix * 3 + 1], d_rgb[pix * 3 + 2]]
                };
                let da = if d_alpha.is_empty() { T::zero() } else { d_alpha[pix] };
                if dc == [T::zero(); 3] && da == T::zero() {
                    continue;
                }
                hits.clear();
                composite_pixel(splats, list, T::c(x as f64), T::c(y as f64), |h| hits.push(*h));
                backward_pixel(splats, list, &hits, dc, da, bg, &mut acc);
            }
        }
        acc
    });

    let mut g2d = vec![zero_grad2d::<T>(); n];
    for (tile, part) in partials.iter().enumerate() {
        for (slot, g) in part.iter().enumerate() {
            g2d[rec.tile_lists[tile][slot] as usize].add(g);
        }
    }

    let cp = CamParams::<T>::new(&rec.camera);
    let nb = sh::num_coeffs(snapshot.sh_degree);
    let per = par::map_range(n, |i| {
        let s = &splats[i];
        if !s.proj.visible {
            return None;
        }
        Some(backward_gaussian(&cp, snapshot, i, s, &g2d[i], nb))
    });

    let mut grads = SnapshotGrads::zeros(n, 3 * nb);
    for (i, r) in per.into_iter().enumerate() {
        let Some((dp, dls, dq, dop, dsh)) = r else {
            output.screen_grad_norm[i] = T::zero();
            continue;
        };
        grads.positions[i] = dp;
        grads.log_scales[i] = dls;
        grads.rotations[i] = dq;
        grads.opacity_logits[i] = dop;
        grads.sh_coeffs[i * 3 * nb..(i + 1) * 3 * nb].copy_from_slice(&dsh);
        let m = g2d[i].mean;
        output.screen_grad_norm[i] = (m[0] * m[0] + m[1] * m[1]).sqrt();
    }
    grads
}

/// Reverse sweep over one pixel's hits. With `R_i` the color seen behind
/// splat `i` and `P_i` the transmittance behind it:
/// `∂C/∂α_i = T_i (c_i − R_i)` and `∂A/∂α_i = T_i P_i`.
fn backward_pixel<T: Real>(
    splats: &[Splat<T>],
    list: &[u32],
    hits: &[Hit<T>],
    dc: [T; 3],
    da: T,
    bg: [T; 3],
    acc: &mut [Grad2D<T>],
) {
    let mut behind = bg;
    let mut behind_t = T::one();
    let half = T::c(0.5);
    for h in hits.iter().rev() {
        let s = &splats[list[h.slot] as usize];
        let g = &mut acc[h.slot];
        let w = h.alpha * h.transmittance;
        let mut d_alpha = da * h.transmittance * behind_t;
        for k in 0..3 {
            g.color[k] += dc[k] * w;
            d_alpha += dc[k] * h.transmittance * (s.color[k] - behind[k]);
        }
        if !h.clamped {
            g.opacity += d_alpha * h.gauss;
            // alpha = o exp(-q/2)
            let d_q = -half * d_alpha * h.alpha;
            let [a, b, c] = s.conic;
            g.conic[0] += d_q * h.dx * h.dx;
            g.conic[1] += d_q * T::c(2.0) * h.dx * h.dy;
            g.conic[2] += d_q * h.dy * h.dy;
            // d = pixel - mean
            g.mean[0] -= d_q * T::c(2.0) * (a * h.dx + b * h.dy);
            g.mean[1] -= d_q * T::c(2.0) * (b * h.dx + c * h.dy);
        }
        for k in 0..3 {
            behind[k] = s.color[k] * h.alpha + (T::one() - h.alpha) * behind[k];
        }
        behind_t *= T::one() - h.alpha;
    }
}

type GaussGrad<T> = (Vec3<T>, Vec3<T>, [T; 4], T, Vec<T>);

fn backward_gaussian<T: Real>(
    cp: &CamParams<T>,
    snapshot: &DeformedSnapshot<'_, T>,
    i: usize,
    s: &Splat<T>,
    g: &Grad2D<T>,
    nb: usize,
) -> GaussGrad<T> {
    let two = T::c(2.0);
    // conic = inverse(cov2d + dilation); dΣ = -Σ⁻¹ Ĝ Σ⁻¹ with the off-diagonal
    // conic gradient split over both symmetric entries.
    let [ca, cb, cc] = s.conic;
    let inv = [[ca, cb], [cb, cc]];
    let gi = [[g.conic[0], g.conic[1] / two], [g.conic[1] / two, g.conic[2]]];
    let mut tmp = [[T::zero(); 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            tmp[r][c] = gi[r][0] * inv[0][c] + gi[r][1] * inv[1][c];
        }
    }
    let mut d_cov = [[T::zero(); 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            d_cov[r][c] = -(inv[r][0] * tmp[0][c] + inv[r][1] * tmp[1][c]);
        }
    }

    let p = s.p_cam;
    let j = cp.jacobian(&p);
    let sigma = covariance(&snapshot.log_scales[i], &snapshot.rotations[i]);
    let w = cp.rot;
    let m = matmul3(&matmul3(&w, &sigma), &transpose3(&w));

    // Σ₂ = J M Jᵀ: dM = Jᵀ G J, dJ = 2 G J M
    let mut d_m: Mat3<T> = [[T::zero(); 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            let mut acc = T::zero();
            for r in 0..2 {
                for c in 0..2 {
                    acc += j[r][a] * d_cov[r][c] * j[c][b];
                }
            }
            d_m[a][b] = acc;
        }
    }
    let mut gj = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            gj[r][c] = d_cov[r][0] * j[0][c] + d_cov[r][1] * j[1][c];
        }
    }
    let mut d_j = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            d_j[r][c] = two * (gj[r][0] * m[0][c] + gj[r][1] * m[1][c] + gj[r][2] * m[2][c]);
        }
    }
    let d_sigma = matmul3(&matmul3(&transpose3(&w), &d_m), &w);
    let (d_log_scale, d_rot) = covariance_backward(&snapshot.log_scales[i], &snapshot.rotations[i], &d_sigma);

    let (x, y, z) = (p[0], p[1], p[2]);
    let z2 = z * z;
    let z3 = z2 * z;
    let (fx, fy) = (cp.fx, cp.fy);
    let mut d_pc = [T::zero(); 3];
    d_pc[0] += g.mean[0] * fx / z;
    d_pc[1] += g.mean[1] * fy / z;
    d_pc[2] -= g.mean[0] * fx * x / z2 + g.mean[1] * fy * y / z2;
    d_pc[0] -= d_j[0][2] * fx / z2;
    d_pc[1] -= d_j[1][2] * fy / z2;
    d_pc[2] += -d_j[0][0] * fx / z2 + d_j[0][2] * two * fx * x / z3 - d_j[1][1] * fy / z2 + d_j[1][2] * two * fy * y / z3;
    let mut d_pos = matvec3_t(&w, &d_pc);

    let mut d_sh = vec![T::zero(); 3 * nb];
    let d_dir = sh::color_backward(&s.view_dir, snapshot.sh_degree, snapshot.sh_of(i), &s.color_raw, &g.color, &mut d_sh);
    if snapshot.sh_degree > 0 {
        let dd = s.view_dir;
        let proj = dd[0] * d_dir[0] + dd[1] * d_dir[1] + dd[2] * d_dir[2];
        for k in 0..3 {
            d_pos[k] += (d_dir[k] - dd[k] * proj) / s.view_dist;
        }
    }

    let d_logit = g.opacity * s.opacity * (T::one() - s.opacity);
    (d_pos, d_log_scale, d_rot, d_logit, d_sh)
}
