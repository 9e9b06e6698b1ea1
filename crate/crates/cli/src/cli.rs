use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Differentiable dynamic Gaussian splatting at desk scale.
#[derive(Debug, Parser)]
#[command(name = "splat4d", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic multi-view video from known Gaussians
    Synth(SynthArgs),
    /// Run static then dynamic training on a scene manifest
    Fit(FitArgs),
    /// Render a checkpoint from orbit or manifest cameras over a time range
    Render(RenderArgs),
    /// Write the deformed cloud at one time as a PLY file
    Export(ExportArgs),
    /// Histogram of log screen-space gradient magnitudes
    GradHist(GradHistArgs),
    /// PSNR/SSIM of rendered frames against ground truth
    Eval(EvalArgs),
    /// Generate or check attention test vectors
    AttnTest(AttnArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Built-in scene: static16 or translating-blob
    #[arg(long, conflicts_with = "spec")]
    pub preset: Option<String>,
    /// JSON scene description (primitives, motion, camera rings)
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Override the number of timesteps
    #[arg(long)]
    pub timesteps: Option<u32>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// Scene manifest (JSON)
    #[arg(long)]
    pub manifest: PathBuf,
    /// TOML training configuration; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoint, loss CSV and config snapshot
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub static_steps: Option<u64>,
    #[arg(long)]
    pub dynamic_steps: Option<u64>,
    #[arg(long)]
    pub sh_degree: Option<usize>,
    #[arg(long)]
    pub rec_weight: Option<f32>,
    #[arg(long)]
    pub mask_weight: Option<f32>,
    /// Score distillation weight; 0 disables it
    #[arg(long)]
    pub mvsds_weight: Option<f32>,
    #[arg(long)]
    pub views_per_step: Option<usize>,
    /// Number of random initial Gaussians
    #[arg(long)]
    pub init_count: Option<usize>,
    /// Percentage of Gaussians densified per round
    #[arg(long)]
    pub densify_percent: Option<f64>,
    #[arg(long)]
    pub densify_interval: Option<u64>,
    /// Deformation decoder learning rate at the start of stage 2
    #[arg(long)]
    pub deformation_lr: Option<f64>,
    /// Background colour r,g,b; defaults to the manifest's
    #[arg(long, value_parser = parse_rgb)]
    pub background: Option<[f32; 3]>,
    /// Testing hook: make the loss NaN at this global step
    #[arg(long, hide = true)]
    pub inject_nan_at_step: Option<u64>,
    /// Print progress every N steps (0 = silent)
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Use the manifest's cameras (one per view id) instead of an orbit
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Orbit camera count
    #[arg(long, default_value_t = 12)]
    pub views: u32,
    #[arg(long, default_value_t = 4.0)]
    pub radius: f64,
    #[arg(long, default_value_t = 15.0)]
    pub elevation: f64,
    #[arg(long, default_value_t = 64)]
    pub width: u32,
    #[arg(long, default_value_t = 64)]
    pub height: u32,
    /// Horizontal field of view in degrees
    #[arg(long, default_value_t = 40.0)]
    pub fov: f64,
    /// Frames per view, spread evenly over [t-start, t-end]
    #[arg(long, default_value_t = 8)]
    pub frames: u32,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub t_start: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub t_end: f64,
    #[arg(long, value_parser = parse_rgb, default_value = "1,1,1")]
    pub background: [f32; 3],
}

#[derive(Debug, Args, Serialize)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Normalized time in [0, 1]
    #[arg(long, default_value_t = 0.0)]
    pub t: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct GradHistArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scene whose training views produce the gradients
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub bins: usize,
    /// Must match the values used for training
    #[arg(long, default_value_t = 4e4)]
    pub rec_weight: f32,
    #[arg(long, default_value_t = 1e4)]
    pub mask_weight: f32,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Directory of rendered PNGs
    #[arg(long)]
    pub rendered: PathBuf,
    /// Directory of ground-truth PNGs with the same relative paths
    #[arg(long)]
    pub ground_truth: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AttnArgs {
    #[command(subcommand)]
    pub action: AttnAction,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum AttnAction {
    /// Write random Q/K/V frames and the expected anchored outputs
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        frames: usize,
        /// Query tokens per frame
        #[arg(long, default_value_t = 8)]
        tokens: usize,
        /// Key/value tokens per frame
        #[arg(long, default_value_t = 8)]
        kv_tokens: usize,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        /// Reference tokens per frame (0 = no reference stream)
        #[arg(long, default_value_t = 4)]
        ref_tokens: usize,
        /// Anchor mixing weight γ
        #[arg(long, default_value_t = 0.5)]
        gamma: f32,
    },
    /// Recompute every case in a test-vector directory and compare
    Check {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f32,
    },
}

pub fn parse_rgb(s: &str) -> Result<[f32; 3], String> {
    let parts: Vec<f32> = s
        .split(',')
        .map(|p| p.trim().parse::<f32>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts.as_slice() {
        [r, g, b] => Ok([*r, *g, *b]),
        _ => Err(format!("expected r,g,b, got {s:?}")),
    }
}
