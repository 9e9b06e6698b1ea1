//! Adam with per-tensor state, learning-rate schedules and the Gaussian /
//! deformation parameter groups.

use serde::{Deserialize, Serialize};

use crate::deformation::{DeformationGrads, FieldGroup, HexPlaneField};
use crate::densify::TopologyChange;
use crate::gaussian::GaussianCloud;
use crate::raster::SnapshotGrads;

pub const BETA1: f32 = 0.9;
pub const BETA2: f32 = 0.999;
pub const EPS: f32 = 1e-15;

/// Exponential interpolation from `start` at step 0 to `end` at `steps`.
pub fn exp_decay(start: f64, end: f64, step: u64, steps: u64) -> f64 {
    if steps == 0 {
        return start;
    }
    let f = (step.min(steps) as f64) / steps as f64;
    start * (end / start).powf(f)
}

/// Adam moments for one flat tensor of `rows × width` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub steps: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f32) {
        self.step_with(params, grads, |_| lr);
    }

    /// Like [`step`](Self::step) with a per-element learning rate.
    pub fn step_with(&mut self, params: &mut [f32], grads: &[f32], lr: impl Fn(usize) -> f32) {
        debug_assert_eq!(params.len(), grads.len());
        debug_assert_eq!(params.len(), self.m.len());
        self.steps += 1;
        let bc1 = 1.0 - BETA1.powi(self.steps as i32);
        let bc2 = 1.0 - BETA2.powi(self.steps as i32);
        let bc2_sqrt = bc2.sqrt();
        for (i, ((p, &g), (m, v))) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())).enumerate() {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr(i) / bc1 * *m / (v.sqrt() / bc2_sqrt + EPS);
        }
    }

    /// Rebuilds moments after a topology change; rows that do not carry
    /// state start from zero.
    pub fn gather(&mut self, change: &TopologyChange, width: usize) {
        let pick = |src: &[f32]| -> Vec<f32> {
            let mut out = vec![0.0; change.source.len() * width];
            for (row, (&s, &keep)) in change.source.iter().zip(&change.carries_state).enumerate() {
                if keep {
                    out[row * width..(row + 1) * width].copy_from_slice(&src[s * width..(s + 1) * width]);
                }
            }
            out
        };
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }

    /// Zeroes the moments of the listed rows.
    pub fn reset_rows(&mut self, rows: &[usize], width: usize) {
        for &r in rows {
            self.m[r * width..(r + 1) * width].fill(0.0);
            self.v[r * width..(r + 1) * width].fill(0.0);
        }
    }
}

/// Learning rates. Position and grid rates are multiplied by the scene extent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrConfig {
    pub position: f64,
    pub position_final: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
    pub sh: f64,
    pub sh_rest: f64,
    pub deformation: f64,
    pub deformation_final: f64,
    pub grid: f64,
    pub grid_final: f64,
}

impl Default for LrConfig {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final: 1.6e-6,
            opacity: 5e-2,
            scale: 5e-3,
            rotation: 1e-3,
            sh: 2.5e-3,
            sh_rest: 2.5e-3 / 20.0,
            deformation: 1.6e-4,
            deformation_final: 1.6e-6,
            grid: 1.6e-3,
            grid_final: 1.6e-5,
        }
    }
}

impl LrConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let all = [
            self.position,
            self.position_final,
            self.opacity,
            self.scale,
            self.rotation,
            self.sh,
            self.sh_rest,
            self.deformation,
            self.deformation_final,
            self.grid,
            self.grid_final,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(crate::Error::Config("learning rates must be positive and finite".into()));
        }
        Ok(())
    }

    /// Deformation decoder lr at `step` of a `steps`-long dynamic stage.
    pub fn deformation_at(&self, step: u64, steps: u64) -> f64 {
        exp_decay(self.deformation, self.deformation_final, step, steps)
    }

    /// Hex-plane grid lr, scaled by the scene extent like positions.
    pub fn grid_at(&self, step: u64, steps: u64, extent: f64) -> f64 {
        extent * exp_decay(self.grid, self.grid_final, step, steps)
    }

    pub fn position_at(&self, step: u64, steps: u64, extent: f64) -> f64 {
        extent * exp_decay(self.position, self.position_final, step, steps)
    }
}

/// One Adam state per Gaussian attribute.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianOptimizer {
    pub positions: Adam,
    pub log_scales: Adam,
    pub rotations: Adam,
    pub opacity_logits: Adam,
    pub sh_coeffs: Adam,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianLrs {
    pub position: f32,
    pub scale: f32,
    pub rotation: f32,
    pub opacity: f32,
    /// Degree-0 SH coefficients.
    pub sh: f32,
    /// Higher-degree SH coefficients.
    pub sh_rest: f32,
}

fn flat3(v: &mut [[f32; 3]]) -> &mut [f32] {
    v.as_flattened_mut()
}

impl GaussianOptimizer {
    pub fn new(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        Self {
            positions: Adam::new(3 * n),
            log_scales: Adam::new(3 * n),
            rotations: Adam::new(4 * n),
            opacity_logits: Adam::new(n),
            sh_coeffs: Adam::new(cloud.sh_coeffs.len()),
        }
    }

    /// Applies one update and renormalizes quaternions.
    pub fn step(&mut self, cloud: &mut GaussianCloud, grads: &SnapshotGrads, lr: GaussianLrs) {
        self.positions.step(flat3(&mut cloud.positions), grads.positions.as_flattened(), lr.position);
        self.log_scales.step(flat3(&mut cloud.log_scales), grads.log_scales.as_flattened(), lr.scale);
        self.rotations.step(cloud.rotations.as_flattened_mut(), grads.rotations.as_flattened(), lr.rotation);
        self.opacity_logits.step(&mut cloud.opacity_logits, &grads.opacity_logits, lr.opacity);
        let b = cloud.coeffs_per_channel();
        self.sh_coeffs
            .step_with(&mut cloud.sh_coeffs, &grads.sh_coeffs, |i| if i % b == 0 { lr.sh } else { lr.sh_rest });
        cloud.normalize_rotations();
    }

    pub fn apply_topology(&mut self, change: &TopologyChange, coeffs_per_gaussian: usize) {
        self.positions.gather(change, 3);
        self.log_scales.gather(change, 3);
        self.rotations.gather(change, 4);
        self.opacity_logits.gather(change, 1);
        self.sh_coeffs.gather(change, coeffs_per_gaussian);
    }

    pub fn tensors(&self) -> [(&'static str, &Adam); 5] {
        [
            ("positions", &self.positions),
            ("log_scales", &self.log_scales),
            ("rotations", &self.rotations),
            ("opacity_logits", &self.opacity_logits),
            ("sh_coeffs", &self.sh_coeffs),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Adam); 5] {
        [
            ("positions", &mut self.positions),
            ("log_scales", &mut self.log_scales),
            ("rotations", &mut self.rotations),
            ("opacity_logits", &mut self.opacity_logits),
            ("sh_coeffs", &mut self.sh_coeffs),
        ]
    }
}

/// Adam states for every field tensor, in `HexPlaneField::tensors_mut` order.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldOptimizer {
    pub states: Vec<Adam>,
}

impl FieldOptimizer {
    pub fn new(field: &mut HexPlaneField) -> Self {
        Self {
            states: field.tensors_mut().iter().map(|(_, t)| Adam::new(t.len())).collect(),
        }
    }

    pub fn step(&mut self, field: &mut HexPlaneField, grads: &DeformationGrads, grid_lr: f32, decoder_lr: f32) {
        for ((state, (group, params)), g) in self.states.iter_mut().zip(field.tensors_mut()).zip(grads.tensors()) {
            let lr = match group {
                FieldGroup::Grid => grid_lr,
                FieldGroup::Decoder => decoder_lr,
            };
            state.step(params, g, lr);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_endpoints() {
        let lr = LrConfig::default();
        assert!((lr.deformation_at(0, 7000) - 1.6e-4).abs() < 1e-12);
        assert!((lr.deformation_at(7000, 7000) - 1.6e-6).abs() < 1e-12);
        assert!((lr.deformation_at(3500, 7000) - 1.6e-5).abs() < 1e-12);
        assert_eq!(lr.deformation_at(9000, 7000), lr.deformation_at(7000, 7000));
        assert_eq!(exp_decay(2.0, 1.0, 5, 0), 2.0);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut a = Adam::new(3);
        let mut p = [1.0f32, 1.0, 1.0];
        a.step(&mut p, &[2.0, -0.5, 0.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] - 1.1).abs() < 1e-6);
        assert_eq!(p[2], 1.0);
    }

    #[test]
    fn adam_matches_f64_reference() {
        let grads = [0.3f32, -1.2, 0.05, 2.0, -0.7];
        let mut a = Adam::new(1);
        let mut p = [0.5f32];
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.5f64);
        for (k, &g) in grads.iter().enumerate() {
            a.step(&mut p, &[g], 0.01);
            let g = g as f64;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let t = (k + 1) as i32;
            x -= 0.01 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-15);
        }
        assert!((p[0] as f64 - x).abs() < 1e-6);
    }

    #[test]
    fn gather_keeps_carried_rows_and_zeroes_new() {
        let mut a = Adam::new(6);
        a.m = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        a.v = a.m.clone();
        let change = TopologyChange {
            source: vec![2, 0, 0],
            carries_state: vec![true, true, false],
        };
        a.gather(&change, 2);
        assert_eq!(a.m, vec![5.0, 6.0, 1.0, 2.0, 0.0, 0.0]);
        assert_eq!(a.v, a.m);
    }
}
