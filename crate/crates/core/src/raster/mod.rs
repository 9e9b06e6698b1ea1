//! Tile-based differentiable rasterizer: EWA projection, depth sort,
//! front-to-back alpha compositing and the matching analytic backward pass.

mod backward;
mod forward;

pub use backward::{render_backward, SnapshotGrads};
pub use forward::{render, render_many};

use crate::camera::Camera;
use crate::gaussian::{covariance, DeformedSnapshot};
use crate::real::{matmul3, matvec3, norm3, sigmoid, sub3, transpose3, Mat3, Real, Vec3};
use crate::sh;

pub const TILE_SIZE: usize = 16;
/// Added to the diagonal of every screen-space covariance (pixels²).
pub const DILATION: f64 = 0.3;
pub const MAX_SPLAT_ALPHA: f64 = 0.999;
/// Splats are evaluated out to this many standard deviations.
pub const EXTENT_SIGMAS: f64 = 3.0;

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Copy, Debug)]
pub struct Projection<T> {
    pub visible: bool,
    pub mean2d: [T; 2],
    /// Undilated `J W Σ Wᵀ Jᵀ` as `(xx, xy, yy)`.
    pub cov2d: [T; 3],
    pub depth: T,
}

/// Everything the forward pass derives per Gaussian; kept for backward.
#[derive(Clone, Debug)]
pub(crate) struct Splat<T> {
    pub proj: Projection<T>,
    pub p_cam: Vec3<T>,
    pub conic: [T; 3],
    pub opacity: T,
    pub color: [T; 3],
    pub color_raw: [T; 3],
    pub view_dir: Vec3<T>,
    pub view_dist: T,
    pub radius: T,
    pub tiles: [usize; 4],
}

#[derive(Clone, Debug)]
pub(crate) struct RenderRecord<T> {
    pub splats: Vec<Splat<T>>,
    /// Per tile, Gaussian indices in front-to-back order.
    pub tile_lists: Vec<Vec<u32>>,
    pub tiles_x: usize,
    pub background: [T; 3],
    pub camera: Camera,
}

/// Rendered image plus the bookkeeping the backward pass and densification
/// need.
#[derive(Clone, Debug)]
pub struct RenderOutput<T = f32> {
    pub width: usize,
    pub height: usize,
    /// `H × W × 3`, row-major.
    pub rgb: Vec<T>,
    /// `H × W`.
    pub alpha: Vec<T>,
    /// Per Gaussian `‖∂L/∂μ₂D‖` in pixels; zero until `render_backward` runs.
    pub screen_grad_norm: Vec<T>,
    pub visibility: Vec<bool>,
    /// Screen-space radius in pixels (zero when culled).
    pub radii: Vec<T>,
    pub(crate) record: RenderRecord<T>,
}

impl<T: Real> RenderOutput<T> {
    pub fn pixel(&self, x: usize, y: usize) -> [T; 3] {
        let o = (y * self.width + x) * 3;
        [self.rgb[o], self.rgb[o + 1], self.rgb[o + 2]]
    }

    pub fn alpha_at(&self, x: usize, y: usize) -> T {
        self.alpha[y * self.width + x]
    }
}

pub(crate) struct CamParams<T> {
    pub rot: Mat3<T>,
    pub trans: Vec3<T>,
    pub center: Vec3<T>,
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub znear: T,
}

impl<T: Real> CamParams<T> {
    pub fn new(cam: &Camera) -> Self {
        let r = cam.rotation();
        let t = cam.translation();
        let c = cam.center();
        Self {
            rot: r.map(|row| row.map(T::c)),
            trans: t.map(T::c),
            center: c.map(T::c),
            fx: T::c(cam.fx),
            fy: T::c(cam.fy),
            cx: T::c(cam.cx),
            cy: T::c(cam.cy),
            znear: T::c(cam.znear),
        }
    }

    #[inline]
    pub fn to_camera(&self, p: &Vec3<T>) -> Vec3<T> {
        let v = matvec3(&self.rot, p);
        [v[0] + self.trans[0], v[1] + self.trans[1], v[2] + self.trans[2]]
    }

    /// Jacobian of the pinhole projection at camera-space point `p`.
    #[inline]
    pub fn jacobian(&self, p: &Vec3<T>) -> [[T; 3]; 2] {
        let z = p[2];
        let z2 = z * z;
        [
            [self.fx / z, T::zero(), -self.fx * p[0] / z2],
            [T::zero(), self.fy / z, -self.fy * p[1] / z2],
        ]
    }
}

/// `J W Σ Wᵀ Jᵀ` as `(xx, xy, yy)`.
pub(crate) fn screen_covariance<T: Real>(j: &[[T; 3]; 2], m: &Mat3<T>) -> [T; 3] {
    let mut jm = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            jm[r][c] = j[r][0] * m[0][c] + j[r][1] * m[1][c] + j[r][2] * m[2][c];
        }
    }
    let e = |a: usize, b: usize| jm[a][0] * j[b][0] + jm[a][1] * j[b][1] + jm[a][2] * j[b][2];
    [e(0, 0), e(0, 1), e(1, 1)]
}

/// Projects one Gaussian. Returns `(projection, p_cam, W Σ Wᵀ)`.
pub(crate) fn project_one<T: Real>(cp: &CamParams<T>, pos: &Vec3<T>, log_scale: &Vec3<T>, rot: &[T; 4]) -> (Projection<T>, Vec3<T>) {
    let p_cam = cp.to_camera(pos);
    if !(p_cam[2] > cp.znear) {
        return (
            Projection {
                visible: false,
                mean2d: [T::zero(); 2],
                cov2d: [T::zero(); 3],
                depth: p_cam[2],
            },
            p_cam,
        );
    }
    let sigma = covariance(log_scale, rot);
    let m = matmul3(&matmul3(&cp.rot, &sigma), &transpose3(&cp.rot));
    let j = cp.jacobian(&p_cam);
    let cov2d = screen_covariance(&j, &m);
    let mean2d = [
        cp.fx * p_cam[0] / p_cam[2] + cp.cx,
        cp.fy * p_cam[1] / p_cam[2] + cp.cy,
    ];
    (
        Projection {
            visible: true,
            mean2d,
            cov2d,
            depth: p_cam[2],
        },
        p_cam,
    )
}

/// Projects every Gaussian of `snapshot` into `cam`. Gaussians at or behind
/// the near plane come back with `visible == false`.
pub fn project<T: Real>(snapshot: &DeformedSnapshot<'_, T>, cam: &Camera) -> Vec<Projection<T>> {
    let cp = CamParams::<T>::new(cam);
    crate::par::map_range(snapshot.len(), |i| {
        project_one(&cp, &snapshot.positions[i], &snapshot.log_scales[i], &snapshot.rotations[i]).0
    })
}

/// Full per-Gaussian setup for rasterization.
pub(crate) fn prepare_splat<T: Real>(
    cp: &CamParams<T>,
    snapshot: &DeformedSnapshot<'_, T>,
    i: usize,
    width: usize,
    height: usize,
    tiles_x: usize,
    tiles_y: usize,
) -> Splat<T> {
    let pos = &snapshot.positions[i];
    let (mut proj, p_cam) = project_one(cp, pos, &snapshot.log_scales[i], &snapshot.rotations[i]);
    let opacity = sigmoid(snapshot.opacity_logits[i]);
    let diff = sub3(pos, &cp.center);
    let view_dist = norm3(&diff);
    let view_dir = diff.map(|v| v / view_dist);
    let (color, color_raw) = sh::color(snapshot.sh_of(i), &view_dir, snapshot.sh_degree);
    let mut splat = Splat {
        proj,
        p_cam,
        conic: [T::zero(); 3],
        opacity,
        color,
        color_raw,
        view_dir,
        view_dist,
        radius: T::zero(),
        tiles: [0; 4],
    };
    if !proj.visible {
        return splat;
    }
    let d = T::c(DILATION);
    let (a, b, c) = (proj.cov2d[0] + d, proj.cov2d[1], proj.cov2d[2] + d);
    let det = a * c - b * b;
    if !(det > T::zero()) || !det.is_finite() {
        proj.visible = false;
        splat.proj = proj;
        return splat;
    }
    splat.conic = [c / det, -b / det, a / det];
    let mid = T::c(0.5) * (a + c);
    let lambda_max = mid + (mid * mid - det).max(T::zero()).sqrt();
    let radius = (T::c(EXTENT_SIGMAS) * lambda_max.sqrt()).ceil();
    let [mx, my] = proj.mean2d;
    let (mx, my, r) = (mx.as_f64(), my.as_f64(), radius.as_f64());
    let x0 = (mx - r).max(0.0);
    let x1 = (mx + r).min(width as f64 - 1.0);
    let y0 = (my - r).max(0.0);
    let y1 = (my + r).min(height as f64 - 1.0);
    if !(x1 >= x0 && y1 >= y0) {
        proj.visible = false;
        splat.proj = proj;
        return splat;
    }
    let ts = TILE_SIZE as f64;
    splat.tiles = [
        ((x0 / ts).floor() as usize).min(tiles_x - 1),
        ((y0 / ts).floor() as usize).min(tiles_y - 1),
        ((x1 / ts).floor() as usize).min(tiles_x - 1),
        ((y1 / ts).floor() as usize).min(tiles_y - 1),
    ];
    splat.radius = radius;
    splat
}
