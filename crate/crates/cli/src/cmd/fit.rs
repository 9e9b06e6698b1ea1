use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use splat4d_core::io::{load_checkpoint, load_scene, save_checkpoint};
use splat4d_core::sds::ScoreModel;
use splat4d_core::trainer::{anchor_denoiser, loss_csv, train_dynamic, train_static, StepReport, TrainConfig, TrainingState};

use crate::cli::FitArgs;
use crate::config::{resolve, write_snapshot};

pub const CHECKPOINT_FILE: &str = "checkpoint.a4dc";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Serialize)]
struct FitSnapshot<'a> {
    manifest: &'a Path,
    resume: Option<&'a Path>,
    train: &'a TrainConfig,
}

fn save(out: &Path, state: &TrainingState) -> Result<()> {
    save_checkpoint(&out.join(CHECKPOINT_FILE), state)?;
    let csv = out.join(LOSS_FILE);
    fs::write(&csv, loss_csv(&state.history)).with_context(|| format!("writing {}", csv.display()))
}

pub fn run(args: FitArgs) -> Result<()> {
    let config = resolve(&args)?;
    write_snapshot(
        &args.out,
        "fit",
        &FitSnapshot {
            manifest: &args.manifest,
            resume: args.resume.as_deref(),
            train: &config,
        },
    )?;
    let scene = load_scene(&args.manifest)?;
    let mut state = match &args.resume {
        Some(p) => load_checkpoint(p)?,
        None => TrainingState::new(&config, &scene)?,
    };
    let every = args.log_every;
    let last = config.total_steps();
    let log = |r: &StepReport| {
        let n = r.record.step + 1;
        if every > 0 && (n.is_multiple_of(every) || n == last) {
            eprintln!(
                "step {:>6}  loss {:.5}  rec {:.5}  mask {:.5}  mvsds {:.5}  gaussians {}",
                n,
                r.record.total,
                r.record.rec,
                r.record.mask,
                r.record.mvsds,
                r.gaussians
            );
        }
    };
    let denoiser = anchor_denoiser(&scene);
    let model: Option<&dyn ScoreModel> = (config.mvsds_weight > 0.0 && !scene.anchors.is_empty()).then_some(&denoiser as _);
    let mut result = train_static(&mut state, &scene, &config, log);
    if result.is_ok() {
        save(&args.out, &state)?;
        result = train_dynamic(&mut state, &scene, &config, model, log);
    }
    // on divergence the state is still the last good one
    save(&args.out, &state)?;
    result?;
    eprintln!("wrote {}", args.out.join(CHECKPOINT_FILE).display());
    Ok(())
}
