//! Training configuration files and resolved-config snapshots.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use splat4d_core::trainer::TrainConfig;

use crate::cli::FitArgs;

pub const SNAPSHOT_FILE: &str = "resolved.toml";

pub fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// File values overridden by any flags that were given.
pub fn resolve(args: &FitArgs) -> Result<TrainConfig> {
    let mut c = load_train_config(args.config.as_deref())?;
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = args.$flag { c.$($field).+ = v; })*
        };
    }
    set!(
        seed => seed,
        static_steps => static_steps,
        dynamic_steps => dynamic_steps,
        sh_degree => sh_degree,
        rec_weight => rec_weight,
        mask_weight => mask_weight,
        mvsds_weight => mvsds_weight,
        views_per_step => views_per_step,
        init_count => init.count,
        densify_percent => densify.top_percent,
        densify_interval => densify.interval,
        deformation_lr => lr.deformation,
    );
    if args.background.is_some() {
        c.background = args.background;
    }
    if args.inject_nan_at_step.is_some() {
        c.inject_nan_at_step = args.inject_nan_at_step;
    }
    c.validate()?;
    Ok(c)
}

/// Writes `{out}/resolved.toml` describing the invocation.
pub fn write_snapshot(out: &Path, command: &str, value: &impl Serialize) -> Result<()> {
    #[derive(Serialize)]
    struct Snapshot<'a, T> {
        command: &'a str,
        #[serde(flatten)]
        value: &'a T,
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let text = toml::to_string(&Snapshot { command, value }).context("serializing config snapshot")?;
    let path = out.join(SNAPSHOT_FILE);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}
