use std::fs;

use anyhow::{Context, Result};
use splat4d_core::densify::{gradient_histogram, DensifyStats};
use splat4d_core::io::{load_checkpoint, load_scene};
use splat4d_core::loss::recon_loss;
use splat4d_core::raster::{render, render_backward};
use splat4d_core::trainer::normalized_time;

use crate::cli::GradHistArgs;
use crate::config::write_snapshot;

/// Accumulates screen-space gradients of the reconstruction loss over every
/// training view, then writes the log-domain histogram of their means.
pub fn run(args: GradHistArgs) -> Result<()> {
    write_snapshot(&args.out, "grad-hist", &args)?;
    let state = load_checkpoint(&args.checkpoint)?;
    let scene = load_scene(&args.manifest)?;
    let mut stats = DensifyStats::new(state.cloud.len());
    for v in scene.training_views() {
        let t = normalized_time(v.camera.time_index, scene.timesteps());
        let snap = state.field.deform(&state.cloud, t)?;
        let mut out = render(&snap, &v.camera, scene.background());
        let l = recon_loss(&out.rgb, &out.alpha, &v.image, args.rec_weight, args.mask_weight)?;
        render_backward(&snap, &mut out, &l.d_rgb, &l.d_alpha);
        stats.record(&out);
    }
    let hist = gradient_histogram(&stats, args.bins)?;
    let path = args.out.join("grad_hist.csv");
    fs::write(&path, hist.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    println!("{}", path.display());
    Ok(())
}
