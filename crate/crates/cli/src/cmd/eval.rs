use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use splat4d_core::frame::Image;
use splat4d_core::metrics::{psnr, ssim};

use crate::cli::EvalArgs;
use crate::config::write_snapshot;

/// Relative paths of every PNG below `root`.
fn pngs(root: &Path) -> Result<BTreeSet<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeSet<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if path.extension().is_some_and(|e| e == "png") {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = BTreeSet::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

pub fn run(args: EvalArgs) -> Result<()> {
    write_snapshot(&args.out, "eval", &args)?;
    let rendered = pngs(&args.rendered)?;
    let truth = pngs(&args.ground_truth)?;
    if rendered != truth {
        const SHOWN: usize = 20;
        let diffs: Vec<_> = truth
            .difference(&rendered)
            .map(|p| ("rendered", p))
            .chain(rendered.difference(&truth).map(|p| ("ground truth", p)))
            .collect();
        let mut msg = format!("rendered and ground-truth frame sets differ in {} files:", diffs.len());
        for (side, p) in diffs.iter().take(SHOWN) {
            write!(msg, "\n  missing from {side}: {}", p.display())?;
        }
        if diffs.len() > SHOWN {
            write!(msg, "\n  ... and {} more", diffs.len() - SHOWN)?;
        }
        bail!(msg);
    }
    if rendered.is_empty() {
        bail!("no PNG frames under {}", args.rendered.display());
    }
    let mut csv = String::from("frame,psnr,ssim\n");
    let (mut sum_psnr, mut sum_ssim) = (0.0, 0.0);
    for rel in &rendered {
        let a = Image::load_png(&args.rendered.join(rel))?;
        let b = Image::load_png(&args.ground_truth.join(rel))?;
        if (a.width, a.height) != (b.width, b.height) {
            bail!("{}: {}×{} vs {}×{}", rel.display(), a.width, a.height, b.width, b.height);
        }
        let p = psnr(&a.rgb, &b.rgb)?;
        let s = ssim(&a.rgb, &b.rgb, a.width, a.height, 3)?;
        sum_psnr += p;
        sum_ssim += s;
        writeln!(csv, "{},{},{:.6}", rel.display(), fmt_psnr(p), s)?;
    }
    let n = rendered.len() as f64;
    writeln!(csv, "mean,{},{:.6}", fmt_psnr(sum_psnr / n), sum_ssim / n)?;
    let path = args.out.join("metrics.csv");
    fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
    println!("mean psnr {} ssim {:.4}", fmt_psnr(sum_psnr / n), sum_ssim / n);
    Ok(())
}
