use std::fs;

use anyhow::{bail, Context, Result};
use splat4d_core::io::{synth_scene, SynthSpec};

use crate::cli::SynthArgs;
use crate::config::write_snapshot;

pub fn run(args: SynthArgs) -> Result<()> {
    let mut spec = match (&args.preset, &args.spec) {
        (Some(name), None) => SynthSpec::preset(name)?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        _ => bail!("give exactly one of --preset or --spec"),
    };
    if let Some(t) = args.timesteps {
        spec.timesteps = t;
    }
    write_snapshot(&args.out, "synth", &args)?;
    let manifest = synth_scene(&spec, &args.out)?;
    println!("{}", manifest.display());
    Ok(())
}
