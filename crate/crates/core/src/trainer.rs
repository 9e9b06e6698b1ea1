//! Two-stage optimization: a static canonical fit on frame 0, then a dynamic
//! fit of cloud and deformation field over all frames.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::deformation::{DeformationGrads, FieldConfig, HexPlaneField};
use crate::densify::{densify_step, reset_opacity, DensifyConfig, DensifyStats};
use crate::error::{Error, Result};
use crate::gaussian::{normalize_quat, DeformedSnapshot, GaussianCloud};
use crate::io::{Scene, View};
use crate::loss::recon_loss;
use crate::optim::{FieldOptimizer, GaussianLrs, GaussianOptimizer, LrConfig};
use crate::par;
use crate::raster::{render, render_backward, RenderOutput, SnapshotGrads};
use crate::real::logit;
use crate::sds::{mvsds, nearest_anchor, sample_noise, AnalyticDenoiser, Condition, ScoreModel, SdsConfig};
use crate::sh::{self, SH_C0};

/// Opacity ceiling applied by periodic opacity resets.
pub const OPACITY_RESET_CEILING: f64 = 0.01;

/// Random initial cloud inside a ball.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub count: usize,
    pub radius: f64,
    pub center: [f64; 3],
    /// Initial standard deviation on every axis.
    pub scale: f64,
    pub opacity: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            count: 1000,
            radius: 1.0,
            center: [0.0; 3],
            scale: 0.05,
            opacity: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub static_steps: u64,
    pub dynamic_steps: u64,
    pub sh_degree: usize,
    /// Overrides the manifest background when set.
    pub background: Option<[f32; 3]>,
    /// λ₃, reconstruction (L1) weight.
    pub rec_weight: f32,
    /// λ₄, mask (alpha MSE) weight.
    pub mask_weight: f32,
    /// Weight of the multi-view score distillation term.
    pub mvsds_weight: f32,
    /// Training views rendered per step; gradients are averaged.
    pub views_per_step: usize,
    pub lr: LrConfig,
    pub densify: DensifyConfig,
    pub field: FieldConfig,
    pub sds: SdsConfig,
    pub init: InitConfig,
    /// Test hook: poison the loss at this global step.
    pub inject_nan_at_step: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            static_steps: 1000,
            dynamic_steps: 7000,
            sh_degree: 3,
            background: None,
            rec_weight: 4e4,
            mask_weight: 1e4,
            mvsds_weight: 1.0,
            views_per_step: 1,
            lr: LrConfig::default(),
            densify: DensifyConfig::default(),
            field: FieldConfig::default(),
            sds: SdsConfig::default(),
            init: InitConfig::default(),
            inject_nan_at_step: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > sh::MAX_SH_DEGREE {
            return Err(Error::Config(format!("sh_degree must be at most {}", sh::MAX_SH_DEGREE)));
        }
        let weights = [self.rec_weight, self.mask_weight, self.mvsds_weight];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.views_per_step == 0 {
            return Err(Error::Config("views_per_step must be at least 1".into()));
        }
        if self.init.count == 0 || !(self.init.scale > 0.0) || !(self.init.opacity > 0.0 && self.init.opacity < 1.0) {
            return Err(Error::Config("init needs count ≥ 1, scale > 0 and opacity in (0, 1)".into()));
        }
        self.lr.validate()?;
        self.densify.validate()?;
        self.field.validate()?;
        self.sds.validate()
    }

    pub fn total_steps(&self) -> u64 {
        self.static_steps + self.dynamic_steps
    }
}

/// One row of the loss history. `total` is the weighted sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub total: f32,
    pub rec: f32,
    pub mask: f32,
    pub mvsds: f32,
}

pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("step,total,rec,mask,mvsds\n");
    for r in history {
        writeln!(s, "{},{},{},{},{}", r.step, r.total, r.rec, r.mask, r.mvsds).unwrap();
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub cloud: GaussianCloud,
    pub field: HexPlaneField,
    pub gaussian_opt: GaussianOptimizer,
    pub field_opt: FieldOptimizer,
    pub stats: DensifyStats,
    /// Completed optimization steps over both stages.
    pub step: u64,
    /// Scene extent that scales the position learning rate.
    pub extent: f32,
    pub seed: u64,
    pub history: Vec<LossRecord>,
}

/// Stream ids reserved for initialization; training steps use their index.
const INIT_STREAM: u64 = u64::MAX;
const FIELD_STREAM: u64 = u64::MAX - 1;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `1.1 ×` the largest distance of a training camera from their mean.
pub fn camera_extent<'a>(cams: impl IntoIterator<Item = &'a Camera>) -> f64 {
    let centers: Vec<[f64; 3]> = cams.into_iter().map(|c| c.center()).collect();
    if centers.is_empty() {
        return 1.0;
    }
    let n = centers.len() as f64;
    let mean = [0, 1, 2].map(|k| centers.iter().map(|c| c[k]).sum::<f64>() / n);
    let r = centers
        .iter()
        .map(|c| ((c[0] - mean[0]).powi(2) + (c[1] - mean[1]).powi(2) + (c[2] - mean[2]).powi(2)).sqrt())
        .fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}

pub fn initial_cloud(config: &TrainConfig) -> GaussianCloud {
    let mut rng = rng_for(config.seed, INIT_STREAM);
    let init = &config.init;
    let b = sh::num_coeffs(config.sh_degree);
    let mut cloud = GaussianCloud::empty(config.sh_degree);
    let log_scale = init.scale.ln() as f32;
    let opacity = logit(init.opacity) as f32;
    while cloud.len() < init.count {
        let p: [f64; 3] = [0; 3].map(|_| rng.random_range(-1.0..1.0));
        if p.iter().map(|v| v * v).sum::<f64>() > 1.0 {
            continue;
        }
        let pos = [0, 1, 2].map(|k| (init.center[k] + init.radius * p[k]) as f32);
        let mut coeffs = vec![0.0f32; 3 * b];
        for c in 0..3 {
            coeffs[c * b] = (rng.random::<f32>() - 0.5) / SH_C0 as f32;
        }
        cloud.push(pos, [log_scale; 3], [1.0, 0.0, 0.0, 0.0], opacity, &coeffs);
    }
    cloud
}

impl TrainingState {
    pub fn new(config: &TrainConfig, scene: &Scene) -> Result<Self> {
        config.validate()?;
        let mut cloud = initial_cloud(config);
        cloud.rotations.iter_mut().for_each(|q| *q = normalize_quat(q));
        let mut field = HexPlaneField::new(config.field.clone(), &mut rng_for(config.seed, FIELD_STREAM))?;
        let extent = camera_extent(scene.training_views().map(|v| &v.camera)) as f32;
        Ok(Self {
            gaussian_opt: GaussianOptimizer::new(&cloud),
            field_opt: FieldOptimizer::new(&mut field),
            stats: DensifyStats::new(cloud.len()),
            cloud,
            field,
            step: 0,
            extent,
            seed: config.seed,
            history: Vec::new(),
        })
    }

    /// Snapshot at normalized time `t`; the canonical cloud when `dynamic`
    /// is false.
    pub fn snapshot(&self, t: f32, dynamic: bool) -> Result<DeformedSnapshot<'_>> {
        if dynamic {
            self.field.deform(&self.cloud, t)
        } else {
            Ok(self.cloud.snapshot())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Static,
    Dynamic,
}

pub fn normalized_time(time_index: u32, timesteps: u32) -> f32 {
    if timesteps <= 1 {
        0.0
    } else {
        time_index as f32 / (timesteps - 1) as f32
    }
}

/// Result of rendering and differentiating one view.
struct ViewPass {
    rec: f32,
    mask: f32,
    mvsds: f32,
    grads: SnapshotGrads,
    field_grads: Option<DeformationGrads>,
    output: RenderOutput,
}

fn differentiate(
    state: &TrainingState,
    snapshot: &DeformedSnapshot<'_>,
    t: f32,
    stage: Stage,
    mut output: RenderOutput,
    d_rgb: &[f32],
    d_alpha: &[f32],
) -> (SnapshotGrads, Option<DeformationGrads>, RenderOutput) {
    let upstream = render_backward(snapshot, &mut output, d_rgb, d_alpha);
    match stage {
        Stage::Static => (upstream, None, output),
        Stage::Dynamic => {
            let (g, fg) = state.field.backward(&state.cloud, t, &upstream);
            (g, Some(fg), output)
        }
    }
}

fn recon_pass(state: &TrainingState, view: &View, config: &TrainConfig, bg: [f32; 3], timesteps: u32, stage: Stage) -> Result<ViewPass> {
    let t = normalized_time(view.camera.time_index, timesteps);
    let snapshot = state.snapshot(t, stage == Stage::Dynamic)?;
    let output = render(&snapshot, &view.camera, bg);
    let l = recon_loss(&output.rgb, &output.alpha, &view.image, config.rec_weight, config.mask_weight)?;
    let (grads, field_grads, output) = differentiate(state, &snapshot, t, stage, output, &l.d_rgb, &l.d_alpha);
    Ok(ViewPass {
        rec: l.rec,
        mask: l.mask,
        mvsds: 0.0,
        grads,
        field_grads,
        output,
    })
}

/// Analytic score model whose target for a camera is the anchor image
/// nearest to it at that camera's timestep.
pub fn anchor_denoiser(scene: &Scene) -> AnalyticDenoiser<impl Fn(&Condition<'_>) -> Vec<f32> + Sync + '_> {
    AnalyticDenoiser::new(move |cond: &Condition<'_>| {
        let anchors = &scene.anchors[cond.target_camera.time_index as usize];
        let i = nearest_anchor(cond.target_camera, anchors.iter().map(|a| &a.camera)).expect("anchor set checked before use");
        anchors[i].image.rgb.clone()
    })
}

/// Per-step outcome, for progress reporting.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub record: LossRecord,
    pub gaussians: usize,
    pub densified: bool,
}

/// One optimization step. On divergence the state is left untouched.
pub fn train_step(state: &mut TrainingState, scene: &Scene, config: &TrainConfig, stage: Stage, model: Option<&dyn ScoreModel>) -> Result<StepReport> {
    let step = state.step;
    let mut rng = rng_for(config.seed, step);
    let bg = config.background.unwrap_or(scene.background());
    let timesteps = scene.timesteps();
    let pool: Vec<&View> = scene
        .training_views()
        .filter(|v| stage == Stage::Dynamic || v.camera.time_index == 0)
        .collect();
    if pool.is_empty() {
        return Err(Error::Config(match stage {
            Stage::Static => "no training view at frame 0".into(),
            Stage::Dynamic => "no training views".into(),
        }));
    }
    let picks: Vec<&View> = (0..config.views_per_step).map(|_| pool[rng.random_range(0..pool.len())]).collect();
    let mut passes: Vec<ViewPass> = par::map_slice(&picks, |v| recon_pass(state, v, config, bg, timesteps, stage))
        .into_iter()
        .collect::<Result<_>>()?;

    let use_sds = stage == Stage::Dynamic && config.mvsds_weight > 0.0 && !scene.anchors.is_empty();
    if use_sds {
        let time = rng.random_range(0..timesteps);
        if let (Some(set), Some(model)) = (scene.anchor_set(time), model) {
            let cam = &set.anchors[rng.random_range(0..set.anchors.len())].camera;
            let t = normalized_time(time, timesteps);
            let diffusion_t = config.sds.sample_t(&mut rng);
            let snapshot = state.snapshot(t, true)?;
            let output = render(&snapshot, cam, bg);
            let noise = sample_noise(&mut rng, output.rgb.len());
            let m = mvsds(&output.rgb, cam, &set, model, &config.sds, diffusion_t, &noise)?;
            let d_rgb: Vec<f32> = m.grad.iter().map(|g| g * config.mvsds_weight).collect();
            let (grads, field_grads, output) = differentiate(state, &snapshot, t, stage, output, &d_rgb, &[]);
            passes.push(ViewPass {
                rec: 0.0,
                mask: 0.0,
                mvsds: m.loss,
                grads,
                field_grads,
                output,
            });
        }
    }

    // reduce in a fixed order; reconstruction terms average over views
    let inv = 1.0 / config.views_per_step as f32;
    let (mut rec, mut mask, mut sds_loss) = (0.0f32, 0.0f32, 0.0f32);
    let mut grads = SnapshotGrads::zeros(state.cloud.len(), 3 * state.cloud.coeffs_per_channel());
    let mut field_grads = (stage == Stage::Dynamic).then(|| state.field.zero_grads());
    for (i, p) in passes.iter().enumerate() {
        let is_recon = i < picks.len();
        let w = if is_recon { inv } else { 1.0 };
        rec += p.rec * inv;
        mask += p.mask * inv;
        sds_loss += p.mvsds;
        let mut g = p.grads.clone();
        if w != 1.0 {
            scale_grads(&mut g, w);
        }
        grads.accumulate(&g);
        if let (Some(acc), Some(fg)) = (field_grads.as_mut(), p.field_grads.as_ref()) {
            let mut fg = fg.clone();
            if w != 1.0 {
                scale_field_grads(&mut fg, w);
            }
            acc.accumulate(&fg);
        }
    }
    let mut total = config.rec_weight * rec + config.mask_weight * mask + config.mvsds_weight * sds_loss;
    if config.inject_nan_at_step == Some(step) {
        total = f32::NAN;
    }
    if !total.is_finite() {
        return Err(Error::Diverged {
            step,
            reason: format!("non-finite loss (rec {rec}, mask {mask}, mvsds {sds_loss})"),
        });
    }
    if !grads.all_finite() || field_grads.as_ref().is_some_and(|g| !g.all_finite()) {
        return Err(Error::Diverged {
            step,
            reason: "non-finite gradient".into(),
        });
    }

    let total_steps = config.total_steps();
    let lr = &config.lr;
    let lrs = GaussianLrs {
        position: lr.position_at(step, total_steps, state.extent as f64) as f32,
        scale: lr.scale as f32,
        rotation: lr.rotation as f32,
        opacity: lr.opacity as f32,
        sh: lr.sh as f32,
        sh_rest: lr.sh_rest as f32,
    };
    state.gaussian_opt.step(&mut state.cloud, &grads, lrs);
    if let Some(fg) = &field_grads {
        let k = step.saturating_sub(config.static_steps);
        let (grid_lr, decoder_lr) = (lr.grid_at(k, config.dynamic_steps, state.extent as f64), lr.deformation_at(k, config.dynamic_steps));
        state.field_opt.step(&mut state.field, fg, grid_lr as f32, decoder_lr as f32);
    }
    for p in &passes {
        state.stats.record(&p.output);
    }
    let record = LossRecord {
        step,
        total,
        rec,
        mask,
        mvsds: sds_loss,
    };
    state.history.push(record);
    state.step += 1;

    let mut densified = false;
    if config.densify.is_due(state.step) {
        let (change, _) = densify_step(&mut state.cloud, &mut state.stats, &config.densify, &mut rng)?;
        state.gaussian_opt.apply_topology(&change, 3 * state.cloud.coeffs_per_channel());
        densified = true;
    }
    if config.densify.opacity_reset_interval > 0 && state.step.is_multiple_of(config.densify.opacity_reset_interval)
        && state.step < config.densify.stop_step
        && state.step < config.total_steps()
    {
        let rows = reset_opacity(&mut state.cloud, OPACITY_RESET_CEILING);
        state.gaussian_opt.opacity_logits.reset_rows(&rows, 1);
    }
    Ok(StepReport {
        record,
        gaussians: state.cloud.len(),
        densified,
    })
}

fn scale_grads(g: &mut SnapshotGrads, w: f32) {
    g.positions.iter_mut().flatten().for_each(|v| *v *= w);
    g.log_scales.iter_mut().flatten().for_each(|v| *v *= w);
    g.rotations.iter_mut().flatten().for_each(|v| *v *= w);
    g.opacity_logits.iter_mut().for_each(|v| *v *= w);
    g.sh_coeffs.iter_mut().for_each(|v| *v *= w);
}

fn scale_field_grads(g: &mut DeformationGrads, w: f32) {
    g.planes.iter_mut().flatten().for_each(|v| *v *= w);
    for d in &mut g.decoders {
        for l in &mut d.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= w);
        }
    }
}

/// Stage 1: fits the canonical cloud to frame 0 with the field frozen.
/// Resumes from `state.step` if it is already inside the stage.
pub fn train_static(state: &mut TrainingState, scene: &Scene, config: &TrainConfig, mut progress: impl FnMut(&StepReport)) -> Result<()> {
    while state.step < config.static_steps {
        let r = train_step(state, scene, config, Stage::Static, None)?;
        progress(&r);
    }
    Ok(())
}

/// Stage 2: fits cloud and deformation over all frames. Without `model`
/// the score distillation term is skipped.
pub fn train_dynamic(
    state: &mut TrainingState,
    scene: &Scene,
    config: &TrainConfig,
    model: Option<&dyn ScoreModel>,
    mut progress: impl FnMut(&StepReport),
) -> Result<()> {
    if config.mvsds_weight > 0.0 && model.is_some() && !scene.anchors.is_empty() && scene.manifest.reference_view.is_none() {
        return Err(Error::Config("score distillation needs a reference_view in the manifest".into()));
    }
    while state.step < config.total_steps() {
        let r = train_step(state, scene, config, Stage::Dynamic, model)?;
        progress(&r);
    }
    Ok(())
}

/// Renders the trained model for `cam` at normalized time `t`.
pub fn render_state(state: &TrainingState, cam: &Camera, t: f32, background: [f32; 3]) -> Result<RenderOutput> {
    Ok(render(&state.field.deform(&state.cloud, t)?, cam, background))
}

/// Opacity-weighted mean position of the deformed cloud at `t`.
pub fn weighted_centroid(state: &TrainingState, t: f32) -> Result<[f64; 3]> {
    let snap = state.field.deform(&state.cloud, t)?;
    let mut acc = [0.0f64; 3];
    let mut w = 0.0f64;
    for i in 0..snap.len() {
        let o = crate::real::sigmoid(snap.opacity_logits[i] as f64);
        for k in 0..3 {
            acc[k] += o * snap.positions[i][k] as f64;
        }
        w += o;
    }
    Ok(acc.map(|v| v / w))
}
