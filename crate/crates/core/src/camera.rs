use serde::{Deserialize, Serialize};

use crate::real::{Mat3, Vec3};

/// Pinhole camera with a rigid world-to-camera transform. Camera space is
/// +z forward, +y down, +x right; pixel centers sit at integer coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Row-major 4×4 rigid transform.
    pub world_to_camera: [[f64; 4]; 4],
    pub time_index: u32,
    pub znear: f64,
}

pub const DEFAULT_ZNEAR: f64 = 0.01;

impl Camera {
    /// Camera at `eye` looking at `target`, with `up` as the world up hint.
    pub fn look_at(eye: Vec3<f64>, target: Vec3<f64>, up: Vec3<f64>, width: u32, height: u32, fov_x_deg: f64) -> Self {
        let z = normalize(sub(target, eye));
        let x = normalize(cross(z, up));
        let y = cross(z, x);
        let r = [x, y, z];
        let t = [-dot(r[0], eye), -dot(r[1], eye), -dot(r[2], eye)];
        let fx = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&r[i]);
            m[i][3] = t[i];
        }
        m[3][3] = 1.0;
        Camera {
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            world_to_camera: m,
            time_index: 0,
            znear: DEFAULT_ZNEAR,
        }
    }

    /// Camera on a sphere around `center` (azimuth about +z, elevation from the
    /// xy-plane), looking at the center with +z up.
    pub fn orbit(center: Vec3<f64>, radius: f64, azimuth_deg: f64, elevation_deg: f64, width: u32, height: u32, fov_x_deg: f64) -> Self {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let eye = [
            center[0] + radius * el.cos() * az.cos(),
            center[1] + radius * el.cos() * az.sin(),
            center[2] + radius * el.sin(),
        ];
        Self::look_at(eye, center, [0.0, 0.0, 1.0], width, height, fov_x_deg)
    }

    pub fn with_time(mut self, time_index: u32) -> Self {
        self.time_index = time_index;
        self
    }

    pub fn rotation(&self) -> Mat3<f64> {
        let m = &self.world_to_camera;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    pub fn translation(&self) -> Vec3<f64> {
        let m = &self.world_to_camera;
        [m[0][3], m[1][3], m[2][3]]
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vec3<f64> {
        let r = self.rotation();
        let t = self.translation();
        [0, 1, 2].map(|j| -(r[0][j] * t[0] + r[1][j] * t[1] + r[2][j] * t[2]))
    }

    /// Viewing direction (camera +z) in world coordinates.
    pub fn forward(&self) -> Vec3<f64> {
        self.rotation()[2]
    }

    /// Determinant of the rotation block and the max deviation of `R Rᵀ`
    /// from identity.
    pub fn rigidity(&self) -> (f64, f64) {
        let r = self.rotation();
        let det = crate::real::det3(&r);
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let d = dot(r[i], r[j]) - if i == j { 1.0 } else { 0.0 };
                err = err.max(d.abs());
            }
        }
        let bottom = &self.world_to_camera[3];
        err = err.max(bottom[0].abs()).max(bottom[1].abs()).max(bottom[2].abs()).max((bottom[3] - 1.0).abs());
        (det, err)
    }

    pub fn is_rigid(&self, tol: f64) -> bool {
        let (det, err) = self.rigidity();
        err <= tol && (det - 1.0).abs() <= tol
    }

    pub fn is_valid(&self) -> bool {
        self.width > 0 && self.height > 0 && self.fx > 0.0 && self.fy > 0.0 && self.is_rigid(1e-6)
    }

    /// Pose of `other` relative to `self`: `(R, T)` mapping this camera's
    /// frame into the other camera's frame.
    pub fn relative_pose(&self, other: &Camera) -> (Mat3<f64>, Vec3<f64>) {
        let ra = self.rotation();
        let ta = self.translation();
        let rb = other.rotation();
        let tb = other.translation();
        // x_b = Rb (Raᵀ (x_a - ta)) + tb
        let r = crate::real::matmul3(&rb, &crate::real::transpose3(&ra));
        let rt = crate::real::matvec3(&r, &ta);
        (r, [tb[0] - rt[0], tb[1] - rt[1], tb[2] - rt[2]])
    }

    /// Applies a world-space rigid rotation about the origin to the camera
    /// (the camera moves with the world).
    pub fn rotated_world(&self, rot: &Mat3<f64>) -> Camera {
        let r = crate::real::matmul3(&self.rotation(), &crate::real::transpose3(rot));
        let mut out = self.clone();
        for i in 0..3 {
            out.world_to_camera[i][..3].copy_from_slice(&r[i]);
        }
        out
    }
}

fn sub(a: Vec3<f64>, b: Vec3<f64>) -> Vec3<f64> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3<f64>, b: Vec3<f64>) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3<f64>, b: Vec3<f64>) -> Vec3<f64> {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: Vec3<f64>) -> Vec3<f64> {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}
