use anyhow::Result;
use splat4d_core::io::{export_ply, load_checkpoint};

use crate::cli::ExportArgs;
use crate::config::write_snapshot;

pub fn run(args: ExportArgs) -> Result<()> {
    write_snapshot(&args.out, "export", &args)?;
    let state = load_checkpoint(&args.checkpoint)?;
    let t = args.t.clamp(0.0, 1.0);
    if t != args.t {
        eprintln!("warning: t = {} clamped to {t}", args.t);
    }
    let path = args.out.join("point_cloud.ply");
    export_ply(&path, &state.cloud, &state.field, t as f32)?;
    println!("{}", path.display());
    Ok(())
}
