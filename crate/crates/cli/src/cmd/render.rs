use anyhow::{Context, Result};
use splat4d_core::camera::Camera;
use splat4d_core::frame::save_png;
use splat4d_core::io::{load_checkpoint, SceneManifest};
use splat4d_core::par;
use splat4d_core::trainer::render_state;

use crate::cli::RenderArgs;
use crate::config::write_snapshot;

fn cameras(args: &RenderArgs) -> Result<Vec<(u32, Camera)>> {
    if let Some(path) = &args.manifest {
        let m = SceneManifest::read(path)?;
        let mut seen = Vec::new();
        let mut out = Vec::new();
        for c in &m.cameras {
            if !seen.contains(&c.view_id) {
                seen.push(c.view_id);
                out.push((c.view_id, c.camera()));
            }
        }
        return Ok(out);
    }
    anyhow::ensure!(args.views > 0 && args.width > 0 && args.height > 0, "need at least one view and a non-empty image");
    Ok((0..args.views)
        .map(|i| {
            let az = 360.0 * i as f64 / args.views as f64;
            (i, Camera::orbit([0.0; 3], args.radius, az, args.elevation, args.width, args.height, args.fov))
        })
        .collect())
}

/// Frame times, clamped into the trained range `[0, 1]`.
pub fn frame_times(t_start: f64, t_end: f64, frames: u32) -> (Vec<f32>, bool) {
    let mut clamped = false;
    let times = (0..frames)
        .map(|k| {
            let t = if frames <= 1 {
                t_start
            } else {
                t_start + (t_end - t_start) * k as f64 / (frames - 1) as f64
            };
            if !(0.0..=1.0).contains(&t) {
                clamped = true;
            }
            t.clamp(0.0, 1.0) as f32
        })
        .collect();
    (times, clamped)
}

pub fn run(args: RenderArgs) -> Result<()> {
    write_snapshot(&args.out, "render", &args)?;
    let state = load_checkpoint(&args.checkpoint)?;
    let cams = cameras(&args)?;
    let (times, clamped) = frame_times(args.t_start, args.t_end, args.frames);
    if clamped {
        eprintln!("warning: times outside the trained range [0, 1] were clamped");
    }
    let jobs: Vec<(u32, Camera, u32, f32)> = cams
        .iter()
        .flat_map(|(id, cam)| times.iter().enumerate().map(move |(k, &t)| (*id, cam.clone(), k as u32, t)))
        .collect();
    let results = par::map_slice(&jobs, |(id, cam, k, t)| -> Result<()> {
        let out = render_state(&state, cam, *t, args.background)?;
        let path = args.out.join(format!("{id:03}")).join(format!("{k:04}.png"));
        save_png(&path, out.width, out.height, &out.rgb, None).with_context(|| format!("writing {}", path.display()))
    });
    results.into_iter().collect::<Result<Vec<_>>>()?;
    eprintln!("wrote {} frames to {}", jobs.len(), args.out.display());
    Ok(())
}
