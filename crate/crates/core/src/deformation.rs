//! Hex-plane deformation field: six factorized 2D feature grids over the
//! axis pairs of `(x, y, z, t)`, fused by Hadamard product and decoded into
//! per-Gaussian residuals for position, log-scale and rotation.

use std::borrow::Cow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{normalize_quat, GaussianCloud};
use crate::par;
use crate::raster::SnapshotGrads;
use crate::real::{Real, Vec3};
use crate::DeformedSnapshot;

/// Coordinate pairs of the six planes; index 3 is time.
pub const PLANE_AXES: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];

/// Output widths of the position, log-scale and rotation decoders.
pub const DECODER_OUTPUTS: [usize; 3] = [3, 3, 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    /// Feature channels per grid cell.
    pub features: usize,
    /// Resolution levels; level `l` has `base_resolution · 2^l` cells per side.
    pub levels: usize,
    pub base_resolution: usize,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Spatial planes start uniform in this range; time planes start at one.
    pub spatial_init: [f64; 2],
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            features: 32,
            levels: 2,
            base_resolution: 32,
            bounds_min: [-1.5; 3],
            bounds_max: [1.5; 3],
            hidden_width: 64,
            hidden_layers: 2,
            spatial_init: [0.1, 0.5],
        }
    }
}

impl FieldConfig {
    pub fn feature_dim(&self) -> usize {
        self.features * self.levels
    }

    pub fn resolution(&self, level: usize) -> usize {
        self.base_resolution << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.features == 0 || self.levels == 0 || self.base_resolution < 2 || self.hidden_width == 0 {
            return Err(Error::Config(format!("invalid field config {self:?}")));
        }
        if (0..3).any(|k| !(self.bounds_max[k] > self.bounds_min[k])) {
            return Err(Error::Config("field bounds must have positive extent".into()));
        }
        Ok(())
    }
}

/// Fully connected network, ReLU between layers, linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T = f32> {
    pub layers: Vec<Linear<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = f32> {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs × inputs`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
        }
    }

    fn apply(&self, x: &[T], out: &mut [T]) {
        for (o, (row, b)) in out.iter_mut().zip(self.weight.chunks_exact(self.inputs).zip(&self.bias)) {
            *o = row.iter().zip(x).map(|(&w, &v)| w * v).sum::<T>() + *b;
        }
    }
}

impl<T: Real> Mlp<T> {
    /// `dims = [in, hidden.., out]`. Hidden layers use uniform
    /// `±1/√fan_in` init; the output layer starts at zero.
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (li, w) in dims.windows(2).enumerate() {
            let mut l = Linear::zeros(w[0], w[1]);
            if li + 2 < dims.len() {
                let bound = 1.0 / (w[0] as f64).sqrt();
                for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                    *v = T::c(rng.random_range(-bound..bound));
                }
            }
            layers.push(l);
        }
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Linear::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    /// Forward pass keeping every layer's post-activation output.
    fn forward_trace(&self, x: &[T]) -> Vec<Vec<T>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (i, l) in self.layers.iter().enumerate() {
            let mut o = vec![T::zero(); l.outputs];
            l.apply(acts.last().unwrap(), &mut o);
            if i + 1 < self.layers.len() {
                for v in &mut o {
                    *v = v.max(T::zero());
                }
            }
            acts.push(o);
        }
        acts
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        self.forward_trace(x).pop().unwrap()
    }

    /// Accumulates parameter gradients into `grads` and returns `∂L/∂x`.
    fn backward(&self, acts: &[Vec<T>], d_out: &[T], grads: &mut Mlp<T>) -> Vec<T> {
        let mut d = d_out.to_vec();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let input = &acts[i];
            let g = &mut grads.layers[i];
            for o in 0..l.outputs {
                g.bias[o] += d[o];
                let row = &mut g.weight[o * l.inputs..(o + 1) * l.inputs];
                for (w, &x) in row.iter_mut().zip(input) {
                    *w += d[o] * x;
                }
            }
            let mut d_in = vec![T::zero(); l.inputs];
            for o in 0..l.outputs {
                let row = &l.weight[o * l.inputs..(o + 1) * l.inputs];
                for (di, &w) in d_in.iter_mut().zip(row) {
                    *di += d[o] * w;
                }
            }
            if i > 0 {
                // ReLU on the previous layer's output
                for (di, &a) in d_in.iter_mut().zip(input) {
                    if a <= T::zero() {
                        *di = T::zero();
                    }
                }
            }
            d = d_in;
        }
        d
    }

    fn add(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += *y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += *y;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HexPlaneField<T = f32> {
    pub config: FieldConfig,
    /// Indexed `level * 6 + plane`; each `res × res × F` with the second
    /// axis of the pair as rows.
    pub planes: Vec<Vec<T>>,
    /// Position, log-scale and rotation decoders.
    pub decoders: [Mlp<T>; 3],
}

/// Gradients w.r.t. every field parameter, shaped like the field itself.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationGrads<T = f32> {
    pub planes: Vec<Vec<T>>,
    pub decoders: [Mlp<T>; 3],
}

impl<T: Real> DeformationGrads<T> {
    pub fn all_finite(&self) -> bool {
        self.planes.iter().flatten().all(|v| v.is_finite())
            && self
                .decoders
                .iter()
                .flat_map(|m| &m.layers)
                .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.planes.iter_mut().zip(&other.planes) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
        for (a, b) in self.decoders.iter_mut().zip(&other.decoders) {
            a.add(b);
        }
    }

    /// Flat views in the same order as [`HexPlaneField::tensors_mut`].
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = self.planes.iter().map(|p| p.as_slice()).collect();
        for d in &self.decoders {
            for l in &d.layers {
                out.push(&l.weight);
                out.push(&l.bias);
            }
        }
        out
    }
}

/// Which optimizer group a field tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldGroup {
    Grid,
    Decoder,
}

/// Per-plane interpolation record for one point and level.
struct PlaneSample<T> {
    /// Offsets (in units of F) of the four corners `(i0,j0),(i1,j0),(i0,j1),(i1,j1)`.
    corners: [usize; 4],
    weights: [T; 4],
    /// `∂w/∂u_a`, `∂w/∂u_b` for the four corners, already scaled by `res − 1`.
    dw_da: [T; 4],
    dw_db: [T; 4],
}

struct PointTrace<T> {
    coords: [T; 4],
    clamped: [bool; 4],
    /// `levels × 6`
    samples: Vec<PlaneSample<T>>,
    /// `levels × 6 × F` interpolated plane features.
    values: Vec<T>,
    features: Vec<T>,
}

/// Sparse per-point contribution to the grid gradients.
struct GridContribution<T> {
    plane: usize,
    corners: [usize; 4],
    weights: [T; 4],
    d_value: Vec<T>,
}

impl<T: Real> HexPlaneField<T> {
    pub fn new(config: FieldConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let f = config.features;
        let mut planes = Vec::with_capacity(config.levels * 6);
        for level in 0..config.levels {
            let r = config.resolution(level);
            for &(_, b) in &PLANE_AXES {
                let plane = if b == 3 {
                    vec![T::one(); r * r * f]
                } else {
                    let [lo, hi] = config.spatial_init;
                    (0..r * r * f).map(|_| T::c(if hi > lo { rng.random_range(lo..hi) } else { lo })).collect()
                };
                planes.push(plane);
            }
        }
        let d = config.feature_dim();
        let decoders = DECODER_OUTPUTS.map(|out| {
            let mut dims = vec![d];
            dims.extend(std::iter::repeat_n(config.hidden_width, config.hidden_layers));
            dims.push(out);
            Mlp::new(&dims, rng)
        });
        Ok(Self { config, planes, decoders })
    }

    pub fn zero_grads(&self) -> DeformationGrads<T> {
        DeformationGrads {
            planes: self.planes.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            decoders: [0, 1, 2].map(|k| self.decoders[k].zeros_like()),
        }
    }

    /// Flat mutable views over every parameter tensor with its group.
    pub fn tensors_mut(&mut self) -> Vec<(FieldGroup, &mut Vec<T>)> {
        let mut out: Vec<(FieldGroup, &mut Vec<T>)> = self.planes.iter_mut().map(|p| (FieldGroup::Grid, p)).collect();
        for d in &mut self.decoders {
            for l in &mut d.layers {
                out.push((FieldGroup::Decoder, &mut l.weight));
                out.push((FieldGroup::Decoder, &mut l.bias));
            }
        }
        out
    }

    /// Named tensors in a fixed order, for serialization.
    pub fn named_tensors(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (i, p) in self.planes.iter().enumerate() {
            out.push((format!("field.plane.{}.{}", i / 6, i % 6), p.as_slice()));
        }
        for (k, d) in self.decoders.iter().enumerate() {
            for (j, l) in d.layers.iter().enumerate() {
                out.push((format!("field.decoder.{k}.{j}.weight"), l.weight.as_slice()));
                out.push((format!("field.decoder.{k}.{j}.bias"), l.bias.as_slice()));
            }
        }
        out
    }

    /// Normalized 4D coordinate of a point; out-of-bounds axes are clamped.
    fn normalize(&self, p: &Vec3<T>, t: T) -> ([T; 4], [bool; 4]) {
        let mut u = [T::zero(); 4];
        let mut clamped = [false; 4];
        for k in 0..4 {
            let raw = if k < 3 {
                let lo = T::c(self.config.bounds_min[k]);
                let hi = T::c(self.config.bounds_max[k]);
                (p[k] - lo) / (hi - lo)
            } else {
                t
            };
            if raw < T::zero() {
                u[k] = T::zero();
                clamped[k] = true;
            } else if raw > T::one() {
                u[k] = T::one();
                clamped[k] = true;
            } else {
                u[k] = raw;
            }
        }
        (u, clamped)
    }

    fn trace(&self, p: &Vec3<T>, t: T) -> PointTrace<T> {
        let f = self.config.features;
        let levels = self.config.levels;
        let (coords, clamped) = self.normalize(p, t);
        let mut samples = Vec::with_capacity(levels * 6);
        let mut values = vec![T::zero(); levels * 6 * f];
        let mut features = vec![T::one(); levels * f];
        for level in 0..levels {
            let r = self.config.resolution(level);
            let scale = T::c((r - 1) as f64);
            for (pi, &(a, b)) in PLANE_AXES.iter().enumerate() {
                let (ia, fa) = cell(coords[a] * scale, r);
                let (ib, fb) = cell(coords[b] * scale, r);
                let one = T::one();
                let corners = [ib * r + ia, ib * r + ia + 1, (ib + 1) * r + ia, (ib + 1) * r + ia + 1].map(|c| c * f);
                let weights = [(one - fa) * (one - fb), fa * (one - fb), (one - fa) * fb, fa * fb];
                let dw_da = [-(one - fb), one - fb, -fb, fb].map(|v| v * scale);
                let dw_db = [-(one - fa), -fa, one - fa, fa].map(|v| v * scale);
                let grid = &self.planes[level * 6 + pi];
                let vals = &mut values[(level * 6 + pi) * f..(level * 6 + pi + 1) * f];
                for (c, w) in corners.iter().zip(&weights) {
                    for (v, g) in vals.iter_mut().zip(&grid[*c..*c + f]) {
                        *v += *w * *g;
                    }
                }
                for (feat, v) in features[level * f..(level + 1) * f].iter_mut().zip(vals.iter()) {
                    *feat *= *v;
                }
                samples.push(PlaneSample { corners, weights, dw_da, dw_db });
            }
        }
        PointTrace {
            coords,
            clamped,
            samples,
            values,
            features,
        }
    }

    /// Fused features for each point at normalized time `t`: per level the
    /// Hadamard product of the six bilinearly interpolated planes, levels
    /// concatenated. Returns `N × (F·R)` row-major.
    pub fn query_features(&self, points: &[Vec3<T>], t: T) -> Vec<T> {
        let rows = par::map_slice(points, |p| self.trace(p, t).features);
        rows.concat()
    }

    /// Decoded `(Δposition, Δlog_scale, Δrotation)` for one point.
    pub fn offsets(&self, p: &Vec3<T>, t: T) -> (Vec3<T>, Vec3<T>, [T; 4]) {
        let feat = self.trace(p, t).features;
        let dp = self.decoders[0].forward(&feat);
        let ds = self.decoders[1].forward(&feat);
        let dr = self.decoders[2].forward(&feat);
        ([dp[0], dp[1], dp[2]], [ds[0], ds[1], ds[2]], [dr[0], dr[1], dr[2], dr[3]])
    }

    /// Applies the field to `cloud` at normalized time `t`. Opacity and SH
    /// are borrowed from the cloud unchanged.
    pub fn deform<'a>(&self, cloud: &'a GaussianCloud<T>, t: T) -> Result<DeformedSnapshot<'a, T>> {
        if cloud.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let per = par::map_range(cloud.len(), |i| {
            let (dp, ds, dr) = self.offsets(&cloud.positions[i], t);
            let p = cloud.positions[i];
            let s = cloud.log_scales[i];
            let q = cloud.rotations[i];
            let pos = [p[0] + dp[0], p[1] + dp[1], p[2] + dp[2]];
            let ls = [s[0] + ds[0], s[1] + ds[1], s[2] + ds[2]];
            // A zero residual leaves the (already unit) quaternion untouched.
            let rot = if dr.iter().all(|v| *v == T::zero()) {
                q
            } else {
                normalize_quat(&[q[0] + dr[0], q[1] + dr[1], q[2] + dr[2], q[3] + dr[3]])
            };
            (pos, ls, rot)
        });
        let mut positions = Vec::with_capacity(per.len());
        let mut log_scales = Vec::with_capacity(per.len());
        let mut rotations = Vec::with_capacity(per.len());
        for (i, (p, s, q)) in per.into_iter().enumerate() {
            if p.iter().chain(&s).chain(&q).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "deformation output",
                    index: i,
                });
            }
            positions.push(p);
            log_scales.push(s);
            rotations.push(q);
        }
        Ok(DeformedSnapshot {
            positions: Cow::Owned(positions),
            log_scales: Cow::Owned(log_scales),
            rotations: Cow::Owned(rotations),
            opacity_logits: &cloud.opacity_logits,
            sh_coeffs: &cloud.sh_coeffs,
            sh_degree: cloud.sh_degree,
        })
    }

    /// Backpropagates snapshot gradients through [`deform`](Self::deform).
    /// Returns gradients for the canonical cloud (opacity and SH pass
    /// straight through) and for every field parameter.
    pub fn backward(&self, cloud: &GaussianCloud<T>, t: T, upstream: &SnapshotGrads<T>) -> (SnapshotGrads<T>, DeformationGrads<T>) {
        const CHUNK: usize = 64;
        let f = self.config.features;
        let n = cloud.len();
        let idx: Vec<usize> = (0..n).collect();
        struct ChunkOut<T> {
            decoders: [Mlp<T>; 3],
            points: Vec<(Vec3<T>, [T; 4], Vec<GridContribution<T>>)>,
        }
        let chunks = par::map_chunks(&idx, CHUNK, |_, ids| {
            let mut decoders = [0, 1, 2].map(|k| self.decoders[k].zeros_like());
            let mut points = Vec::with_capacity(ids.len());
            for &i in ids {
                let tr = self.trace(&cloud.positions[i], t);
                let q = cloud.rotations[i];
                let acts: Vec<Vec<Vec<T>>> = self.decoders.iter().map(|m| m.forward_trace(&tr.features)).collect();
                let dr = &acts[2].last().unwrap();
                let raw = [q[0] + dr[0], q[1] + dr[1], q[2] + dr[2], q[3] + dr[3]];
                let d_raw = normalize_backward(&raw, &upstream.rotations[i]);
                let outs: [&[T]; 3] = [&upstream.positions[i], &upstream.log_scales[i], &d_raw];
                let mut d_feat = vec![T::zero(); tr.features.len()];
                for k in 0..3 {
                    let d = self.decoders[k].backward(&acts[k], outs[k], &mut decoders[k]);
                    for (a, b) in d_feat.iter_mut().zip(&d) {
                        *a += *b;
                    }
                }
                let mut d_coords = [T::zero(); 4];
                let mut contribs = Vec::with_capacity(tr.samples.len());
                for (lp, s) in tr.samples.iter().enumerate() {
                    let level = lp / 6;
                    let pi = lp % 6;
                    let (a, b) = PLANE_AXES[pi];
                    let mut d_value = vec![T::zero(); f];
                    for (ch, dv) in d_value.iter_mut().enumerate() {
                        let mut others = T::one();
                        for qi in 0..6 {
                            if qi != pi {
                                others *= tr.values[(level * 6 + qi) * f + ch];
                            }
                        }
                        *dv = d_feat[level * f + ch] * others;
                    }
                    let grid = &self.planes[lp];
                    for c in 0..4 {
                        let cell = &grid[s.corners[c]..s.corners[c] + f];
                        let dot: T = cell.iter().zip(&d_value).map(|(g, d)| *g * *d).sum();
                        d_coords[a] += s.dw_da[c] * dot;
                        d_coords[b] += s.dw_db[c] * dot;
                    }
                    contribs.push(GridContribution {
                        plane: lp,
                        corners: s.corners,
                        weights: s.weights,
                        d_value,
                    });
                }
                let mut d_pos = upstream.positions[i];
                for k in 0..3 {
                    if !tr.clamped[k] {
                        let extent = T::c(self.config.bounds_max[k] - self.config.bounds_min[k]);
                        d_pos[k] += d_coords[k] / extent;
                    }
                }
                let _ = tr.coords;
                points.push((d_pos, d_raw, contribs));
            }
            ChunkOut { decoders, points }
        });

        let mut field = self.zero_grads();
        let mut canon = SnapshotGrads::zeros(n, upstream.sh_coeffs.len() / n.max(1));
        canon.opacity_logits.copy_from_slice(&upstream.opacity_logits);
        canon.sh_coeffs.copy_from_slice(&upstream.sh_coeffs);
        canon.log_scales.copy_from_slice(&upstream.log_scales);
        let mut i = 0;
        for ch in chunks {
            for k in 0..3 {
                field.decoders[k].add(&ch.decoders[k]);
            }
            for (d_pos, d_rot, contribs) in ch.points {
                canon.positions[i] = d_pos;
                canon.rotations[i] = d_rot;
                for c in contribs {
                    let plane = &mut field.planes[c.plane];
                    for (corner, w) in c.corners.iter().zip(&c.weights) {
                        for (g, d) in plane[*corner..*corner + f].iter_mut().zip(&c.d_value) {
                            *g += *w * *d;
                        }
                    }
                }
                i += 1;
            }
        }
        (canon, field)
    }

    pub fn cast<U: Real>(&self) -> HexPlaneField<U> {
        let cv = |v: &Vec<T>| v.iter().map(|x| U::c(x.as_f64())).collect::<Vec<U>>();
        HexPlaneField {
            config: self.config.clone(),
            planes: self.planes.iter().map(cv).collect(),
            decoders: [0, 1, 2].map(|k| Mlp {
                layers: self.decoders[k]
                    .layers
                    .iter()
                    .map(|l| Linear {
                        inputs: l.inputs,
                        outputs: l.outputs,
                        weight: cv(&l.weight),
                        bias: cv(&l.bias),
                    })
                    .collect(),
            }),
        }
    }
}

/// Cell index and fractional offset for a grid coordinate in `[0, res − 1]`.
#[inline]
fn cell<T: Real>(pos: T, res: usize) -> (usize, T) {
    let i = pos.floor().to_usize().unwrap_or(0).min(res - 2);
    (i, pos - T::c(i as f64))
}

/// Gradient through `q ↦ q / ‖q‖`.
pub fn normalize_backward<T: Real>(q: &[T; 4], d_out: &[T; 4]) -> [T; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let u = q.map(|v| v / n);
    let proj = u[0] * d_out[0] + u[1] * d_out[1] + u[2] * d_out[2] + u[3] * d_out[3];
    [0, 1, 2, 3].map(|k| (d_out[k] - u[k] * proj) / n)
}
