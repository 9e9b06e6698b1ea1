//! Score distillation in pixel space against a pluggable noise predictor,
//! plus the multi-view variant conditioned on the nearest anchor view and
//! the reference view.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::frame::Image;
use crate::real::{Mat3, Vec3};

/// Number of discrete diffusion steps.
pub const DIFFUSION_STEPS: u32 = 1000;

/// Variance-preserving cosine schedule: `α_t = cos(π/2 · t/T)`,
/// `σ_t = sin(π/2 · t/T)`.
pub fn cosine_schedule(t: u32) -> (f64, f64) {
    let s = FRAC_PI_2 * t.min(DIFFUSION_STEPS) as f64 / DIFFUSION_STEPS as f64;
    (s.cos(), s.sin())
}

/// What a view-conditioned model sees besides the noisy image.
#[derive(Clone, Copy, Debug)]
pub struct Condition<'a> {
    pub input_image: &'a Image,
    pub input_camera: &'a Camera,
    /// Camera the noisy image was rendered from.
    pub target_camera: &'a Camera,
}

impl Condition<'_> {
    /// `(R, T)` taking the input camera frame to the target camera frame.
    pub fn relative_pose(&self) -> (Mat3<f64>, Vec3<f64>) {
        self.input_camera.relative_pose(self.target_camera)
    }
}

/// `z = α·signal + σ·noise`. A real network reads only `z`; the clean
/// components are exposed so closed-form models can avoid cancellation.
#[derive(Clone, Copy, Debug)]
pub struct NoisySample<'a> {
    pub z: &'a [f32],
    pub signal: &'a [f32],
    pub noise: &'a [f32],
    pub alpha: f32,
    pub sigma: f32,
}

pub trait ScoreModel: Sync {
    fn predict_noise(&self, sample: &NoisySample<'_>, cond: &Condition<'_>, t: u32) -> Vec<f32>;

    fn noise_schedule(&self, t: u32) -> (f64, f64) {
        cosine_schedule(t)
    }
}

/// Exact noise predictor for images distributed as an isotropic Gaussian
/// around a per-condition target `μ`: `ε̂ = (z − α μ)/σ`.
pub struct AnalyticDenoiser<F> {
    target: F,
}

impl<F: Fn(&Condition<'_>) -> Vec<f32> + Sync> AnalyticDenoiser<F> {
    pub fn new(target: F) -> Self {
        Self { target }
    }

    pub fn target(&self, cond: &Condition<'_>) -> Vec<f32> {
        (self.target)(cond)
    }
}

impl<F: Fn(&Condition<'_>) -> Vec<f32> + Sync> ScoreModel for AnalyticDenoiser<F> {
    fn predict_noise(&self, s: &NoisySample<'_>, cond: &Condition<'_>, _t: u32) -> Vec<f32> {
        if s.sigma == 0.0 {
            // any finite prediction leaves ẑ = z
            return s.noise.to_vec();
        }
        let mu = self.target(cond);
        let ratio = s.alpha / s.sigma;
        // (α x + σ ε − α μ)/σ rearranged so that μ = x cancels exactly
        s.noise.iter().zip(s.signal).zip(&mu).map(|((&e, &x), &m)| e + ratio * (x - m)).collect()
    }
}

/// Predicts zero noise everywhere.
pub struct ZeroModel;

impl ScoreModel for ZeroModel {
    fn predict_noise(&self, s: &NoisySample<'_>, _: &Condition<'_>, _: u32) -> Vec<f32> {
        vec![0.0; s.z.len()]
    }
}

pub fn sample_noise(rng: &mut impl Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

fn noisy(x: &[f32], noise: &[f32], alpha: f32, sigma: f32) -> Vec<f32> {
    x.iter().zip(noise).map(|(&x, &e)| alpha * x + sigma * e).collect()
}

fn check_finite(what: &str, v: &[f32]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::Config(format!("non-finite {what} at element {i}"))),
        None => Ok(()),
    }
}

/// `ω(t)·(ε̂(α x + σ ε) − ε)`, the gradient injected at the rendered image.
pub fn sds_gradient(x: &[f32], model: &dyn ScoreModel, cond: &Condition<'_>, t: u32, weight: f32, noise: &[f32]) -> Result<Vec<f32>> {
    if x.len() != noise.len() {
        return Err(Error::Shape(format!("image has {} values, noise {}", x.len(), noise.len())));
    }
    check_finite("render", x)?;
    if weight == 0.0 {
        return Ok(vec![0.0; x.len()]);
    }
    let (alpha, sigma) = model.noise_schedule(t);
    let (alpha, sigma) = (alpha as f32, sigma as f32);
    let z = noisy(x, noise, alpha, sigma);
    let sample = NoisySample {
        z: &z,
        signal: x,
        noise,
        alpha,
        sigma,
    };
    let eps_hat = model.predict_noise(&sample, cond, t);
    if eps_hat.len() != x.len() {
        return Err(Error::Shape(format!("model predicted {} values for {}", eps_hat.len(), x.len())));
    }
    check_finite("noise prediction", &eps_hat)?;
    Ok(eps_hat.iter().zip(noise).map(|(&p, &e)| weight * (p - e)).collect())
}

/// `ẑ = z − σ ε̂`.
pub fn denoised_estimate(sample: &NoisySample<'_>, model: &dyn ScoreModel, cond: &Condition<'_>, t: u32) -> Vec<f32> {
    let eps_hat = model.predict_noise(sample, cond, t);
    sample.z.iter().zip(&eps_hat).map(|(&z, &e)| z - sample.sigma * e).collect()
}

fn angle(a: Vec3<f64>, b: Vec3<f64>) -> f64 {
    let d = crate::real::dot3(&a, &b) / (crate::real::norm3(&a) * crate::real::norm3(&b));
    d.clamp(-1.0, 1.0).acos()
}

/// Index of the camera whose viewing direction is closest in angle to
/// `cam`'s; ties go to the lower index.
pub fn nearest_anchor<'a>(cam: &Camera, anchors: impl IntoIterator<Item = &'a Camera>) -> Result<usize> {
    let f = cam.forward();
    let mut best: Option<(usize, f64)> = None;
    for (i, a) in anchors.into_iter().enumerate() {
        let d = angle(f, a.forward());
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i).ok_or_else(|| Error::Config("anchor set is empty".into()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorView {
    pub camera: Camera,
    pub image: Image,
}

/// Anchor views of one timestep plus the reference view.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub anchors: Vec<AnchorView>,
    pub reference: AnchorView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdsConfig {
    /// Diffusion step range as fractions of the schedule.
    pub t_min: f64,
    pub t_max: f64,
    /// Constant ω(t).
    pub weight: f32,
    pub lambda_anchor: f32,
    pub lambda_ref: f32,
}

impl Default for SdsConfig {
    fn default() -> Self {
        Self {
            t_min: 0.02,
            t_max: 0.98,
            weight: 1.0,
            lambda_anchor: 1.0,
            lambda_ref: 1.0,
        }
    }
}

impl SdsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.t_min && self.t_min <= self.t_max && self.t_max <= 1.0) {
            return Err(Error::Config(format!("need 0 ≤ t_min ≤ t_max ≤ 1, got [{}, {}]", self.t_min, self.t_max)));
        }
        if [self.weight, self.lambda_anchor, self.lambda_ref].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("sds weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Uniform integer step in the configured range.
    pub fn sample_t(&self, rng: &mut impl Rng) -> u32 {
        let lo = (self.t_min * DIFFUSION_STEPS as f64).round() as u32;
        let hi = (self.t_max * DIFFUSION_STEPS as f64).round() as u32;
        rng.random_range(lo..=hi)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MvsdsOutput {
    pub anchor: usize,
    pub grad: Vec<f32>,
    /// `½ mean(g²)`, a magnitude for logging only.
    pub loss: f32,
}

/// `λ₁·SDS(anchor_i) + λ₂·SDS(reference)` with the same `t` and `ε` for both
/// terms, `i` being the anchor nearest to `cam`.
pub fn mvsds(render: &[f32], cam: &Camera, set: &AnchorSet, model: &dyn ScoreModel, cfg: &SdsConfig, t: u32, noise: &[f32]) -> Result<MvsdsOutput> {
    let i = nearest_anchor(cam, set.anchors.iter().map(|a| &a.camera))?;
    let term = |view: &AnchorView, lambda: f32| -> Result<Vec<f32>> {
        let cond = Condition {
            input_image: &view.image,
            input_camera: &view.camera,
            target_camera: cam,
        };
        sds_gradient(render, model, &cond, t, cfg.weight * lambda, noise)
    };
    let a = term(&set.anchors[i], cfg.lambda_anchor)?;
    let r = term(&set.reference, cfg.lambda_ref)?;
    let grad: Vec<f32> = a.iter().zip(&r).map(|(x, y)| x + y).collect();
    let loss = 0.5 * grad.iter().map(|g| (*g as f64).powi(2)).sum::<f64>() / grad.len().max(1) as f64;
    Ok(MvsdsOutput {
        anchor: i,
        grad,
        loss: loss as f32,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cam(az: f64) -> Camera {
        Camera::orbit([0.0; 3], 4.0, az, 10.0, 8, 8, 50.0)
    }

    fn fixed(mu: Vec<f32>) -> AnalyticDenoiser<impl Fn(&Condition<'_>) -> Vec<f32> + Sync> {
        AnalyticDenoiser::new(move |_: &Condition<'_>| mu.clone())
    }

    fn with_cond<R>(f: impl FnOnce(&Condition<'_>) -> R) -> R {
        let img = Image::filled(2, 2, [0.0; 3]);
        let c = cam(0.0);
        f(&Condition {
            input_image: &img,
            input_camera: &c,
            target_camera: &c,
        })
    }

    #[test]
    fn schedule_endpoints_and_identity() {
        assert_eq!(cosine_schedule(0), (1.0, 0.0));
        let (a, s) = cosine_schedule(DIFFUSION_STEPS);
        assert!(a.abs() < 1e-15 && (s - 1.0).abs() < 1e-15);
        for t in 0..=DIFFUSION_STEPS {
            let (a, s) = cosine_schedule(t);
            assert!((a * a + s * s - 1.0).abs() < 1e-12);
            if t > 0 {
                assert!(s >= cosine_schedule(t - 1).1);
            }
        }
    }

    #[test]
    fn target_fixed_point_gives_exact_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Vec<f32> = (0..48).map(|_| rng.random()).collect();
        let noise = sample_noise(&mut rng, 48);
        let model = fixed(x.clone());
        for t in [1, 20, 500, 980, 1000] {
            let g = with_cond(|c| sds_gradient(&x, &model, c, t, 1.0, &noise)).unwrap();
            assert!(g.iter().all(|&v| v == 0.0), "t = {t}");
        }
    }

    #[test]
    fn gradient_closed_form_and_matches_direct_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f32> = (0..12).map(|_| rng.random()).collect();
        let mu: Vec<f32> = (0..12).map(|_| rng.random()).collect();
        let noise = sample_noise(&mut rng, 12);
        let model = fixed(mu.clone());
        let t = 300;
        let (a, s) = cosine_schedule(t);
        let g = with_cond(|c| sds_gradient(&x, &model, c, t, 2.0, &noise)).unwrap();
        for i in 0..12 {
            let closed = 2.0 * (a / s) * (x[i] - mu[i]) as f64;
            let z = a * x[i] as f64 + s * noise[i] as f64;
            let direct = 2.0 * ((z - a * mu[i] as f64) / s - noise[i] as f64);
            assert!((g[i] as f64 - closed).abs() < 1e-5);
            assert!((g[i] as f64 - direct).abs() < 1e-5);
        }
        let zero = with_cond(|c| sds_gradient(&x, &model, c, t, 0.0, &noise)).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn denoised_estimate_cases() {
        let x = vec![0.2f32, 0.9, 0.4];
        let mu = vec![0.5f32, 0.1, 0.7];
        let noise = vec![0.3f32, -1.1, 0.6];
        let model = fixed(mu.clone());
        for t in [0u32, 250, 700] {
            let (a, s) = cosine_schedule(t);
            let (a, s) = (a as f32, s as f32);
            let z = noisy(&x, &noise, a, s);
            let sample = NoisySample {
                z: &z,
                signal: &x,
                noise: &noise,
                alpha: a,
                sigma: s,
            };
            let zhat = with_cond(|c| denoised_estimate(&sample, &model, c, t));
            if t == 0 {
                assert_eq!(zhat, z);
            } else {
                for i in 0..3 {
                    assert!((zhat[i] - a * mu[i]).abs() < 1e-6);
                }
            }
            assert_eq!(with_cond(|c| denoised_estimate(&sample, &ZeroModel, c, t)), z);
        }
    }

    #[test]
    fn descent_reaches_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 32 * 32 * 3;
        let mu: Vec<f32> = (0..n).map(|_| rng.random()).collect();
        let mut x: Vec<f32> = (0..n).map(|_| rng.random()).collect();
        let model = fixed(mu.clone());
        let cfg = SdsConfig::default();
        let dist = |x: &[f32]| x.iter().zip(&mu).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
        let d0 = dist(&x);
        let mut prev = d0;
        for _ in 0..200 {
            let t = cfg.sample_t(&mut rng);
            let noise = sample_noise(&mut rng, n);
            let g = with_cond(|c| sds_gradient(&x, &model, c, t, 1.0, &noise)).unwrap();
            x.iter_mut().zip(&g).for_each(|(v, g)| *v -= 0.01 * g);
            let d = dist(&x);
            assert!(d < prev);
            prev = d;
        }
        assert!(prev < 0.05 * d0, "{prev} vs {d0}");
    }

    #[test]
    fn anchor_selection() {
        let anchors: Vec<Camera> = [30.0, 90.0, 150.0, 210.0, 270.0, 330.0].iter().map(|&a| cam(a)).collect();
        assert_eq!(nearest_anchor(&cam(100.0), &anchors).unwrap(), 1);
        assert_eq!(nearest_anchor(&anchors[3], &anchors).unwrap(), 3);
        // 60° is equidistant from 30° and 90°
        assert_eq!(nearest_anchor(&cam(60.0), &anchors).unwrap(), 0);
        assert!(nearest_anchor(&cam(0.0), &[]).is_err());
    }

    #[test]
    fn lambda_anchor_zero_leaves_reference_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f32> = (0..12).map(|_| rng.random()).collect();
        let noise = sample_noise(&mut rng, 12);
        let img = |v: f32| Image::filled(2, 2, [v; 3]);
        let set = AnchorSet {
            anchors: vec![
                AnchorView { camera: cam(0.0), image: img(0.1) },
                AnchorView { camera: cam(90.0), image: img(0.9) },
            ],
            reference: AnchorView { camera: cam(180.0), image: img(0.5) },
        };
        // target depends on which image conditions the model
        let model = AnalyticDenoiser::new(|c: &Condition<'_>| c.input_image.rgb.clone());
        let cfg = SdsConfig {
            lambda_anchor: 0.0,
            ..SdsConfig::default()
        };
        let out = mvsds(&x, &cam(80.0), &set, &model, &cfg, 400, &noise).unwrap();
        assert_eq!(out.anchor, 1);
        let reference = Condition {
            input_image: &set.reference.image,
            input_camera: &set.reference.camera,
            target_camera: &cam(80.0),
        };
        assert_eq!(out.grad, sds_gradient(&x, &model, &reference, 400, 1.0, &noise).unwrap());
    }

    #[test]
    fn non_finite_render_is_rejected() {
        let model = fixed(vec![0.0; 2]);
        assert!(with_cond(|c| sds_gradient(&[f32::NAN, 0.0], &model, c, 10, 1.0, &[0.0, 0.0])).is_err());
    }
}
