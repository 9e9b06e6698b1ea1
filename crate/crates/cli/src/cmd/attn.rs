//! Attention test vectors: raw float32 dumps plus a JSON manifest naming the
//! role of each file.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use splat4d_core::attention::{anchored_sequence_pass, FrameQkv, ReferenceKv, Tensor2};
use splat4d_core::frame::RawTensor;

use crate::cli::{AttnAction, AttnArgs};
use crate::config::write_snapshot;

const MANIFEST: &str = "vectors.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameFiles {
    q: String,
    k: String,
    v: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ref_k: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ref_v: Option<String>,
    expected: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VectorManifest {
    gamma: f32,
    /// Raw frame-0 keys and values that later frames are mixed with.
    anchor_k: String,
    anchor_v: String,
    frames: Vec<FrameFiles>,
}

/// A `T × C` matrix is stored as height 1, width T, C channels.
fn to_raw(t: &Tensor2) -> RawTensor {
    RawTensor {
        height: 1,
        width: t.rows as u32,
        channels: t.cols as u32,
        data: t.data.clone(),
    }
}

fn read(dir: &Path, name: &str) -> Result<Tensor2> {
    let raw = RawTensor::read(&dir.join(name))?;
    Ok(Tensor2::new((raw.height * raw.width) as usize, raw.channels as usize, raw.data)?)
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
    Tensor2::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized")
}

fn generate(out: &Path, seed: u64, frames: usize, tokens: usize, kv: usize, channels: usize, ref_tokens: usize, gamma: f32) -> Result<()> {
    if frames == 0 || channels == 0 {
        bail!("need at least one frame and one channel");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let qkv: Vec<FrameQkv> = (0..frames)
        .map(|_| FrameQkv {
            q: random(&mut rng, tokens, channels),
            k: random(&mut rng, kv, channels),
            v: random(&mut rng, kv, channels),
        })
        .collect();
    let refs: Option<Vec<ReferenceKv>> = (ref_tokens > 0).then(|| {
        (0..frames)
            .map(|_| ReferenceKv {
                k: random(&mut rng, ref_tokens, channels),
                v: random(&mut rng, ref_tokens, channels),
            })
            .collect()
    });
    let outputs = anchored_sequence_pass(&qkv, gamma, refs.as_deref())?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut files = Vec::new();
    for (i, f) in qkv.iter().enumerate() {
        let name = |role: &str| format!("frame{i:03}_{role}.f32");
        to_raw(&f.q).write(&out.join(name("q")))?;
        to_raw(&f.k).write(&out.join(name("k")))?;
        to_raw(&f.v).write(&out.join(name("v")))?;
        to_raw(&outputs[i]).write(&out.join(name("expected")))?;
        if let Some(r) = &refs {
            to_raw(&r[i].k).write(&out.join(name("ref_k")))?;
            to_raw(&r[i].v).write(&out.join(name("ref_v")))?;
        }
        files.push(FrameFiles {
            q: name("q"),
            k: name("k"),
            v: name("v"),
            ref_k: refs.as_ref().map(|_| name("ref_k")),
            ref_v: refs.as_ref().map(|_| name("ref_v")),
            expected: name("expected"),
        });
    }
    to_raw(&qkv[0].k).write(&out.join("anchor_k.f32"))?;
    to_raw(&qkv[0].v).write(&out.join("anchor_v.f32"))?;
    let manifest = VectorManifest {
        gamma,
        anchor_k: "anchor_k.f32".into(),
        anchor_v: "anchor_v.f32".into(),
        frames: files,
    };
    fs::write(out.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    println!("{}", out.join(MANIFEST).display());
    Ok(())
}

fn check(dir: &Path, out: &Path, tolerance: f32) -> Result<()> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let m: VectorManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let frames = m
        .frames
        .iter()
        .map(|f| {
            Ok(FrameQkv {
                q: read(dir, &f.q)?,
                k: read(dir, &f.k)?,
                v: read(dir, &f.v)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let refs = m
        .frames
        .iter()
        .map(|f| match (&f.ref_k, &f.ref_v) {
            (Some(k), Some(v)) => Ok(Some(ReferenceKv {
                k: read(dir, k)?,
                v: read(dir, v)?,
            })),
            (None, None) => Ok(None),
            _ => bail!("frame lists only one of ref_k / ref_v"),
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Option<Vec<ReferenceKv>> = if refs.iter().all(Option::is_some) && !refs.is_empty() {
        Some(refs.into_iter().flatten().collect())
    } else if refs.iter().all(Option::is_none) {
        None
    } else {
        bail!("reference streams must be given for every frame or none");
    };
    // the stored anchor must be frame 0's raw keys and values
    let (ak, av) = (read(dir, &m.anchor_k)?, read(dir, &m.anchor_v)?);
    if frames.first().is_some_and(|f| f.k != ak || f.v != av) {
        bail!("anchor tensors differ from frame 0's keys/values");
    }
    let outputs = anchored_sequence_pass(&frames, m.gamma, refs.as_deref())?;
    let mut report = String::from("frame,max_abs_diff,pass\n");
    let mut failed = 0;
    for (i, (f, o)) in m.frames.iter().zip(&outputs).enumerate() {
        let expected = read(dir, &f.expected)?;
        if (expected.rows, expected.cols) != (o.rows, o.cols) {
            bail!("frame {i}: expected {}×{}, computed {}×{}", expected.rows, expected.cols, o.rows, o.cols);
        }
        let d = o.max_abs_diff(&expected);
        let pass = d <= tolerance;
        failed += usize::from(!pass);
        writeln!(report, "{i},{d:e},{pass}")?;
    }
    fs::write(out.join("attn_report.csv"), &report)?;
    print!("{report}");
    if failed > 0 {
        bail!("{failed} of {} frames exceed tolerance {tolerance:e}", outputs.len());
    }
    Ok(())
}

pub fn run(args: AttnArgs) -> Result<()> {
    match &args.action {
        AttnAction::Generate {
            out,
            seed,
            frames,
            tokens,
            kv_tokens,
            channels,
            ref_tokens,
            gamma,
        } => {
            write_snapshot(out, "attn-test generate", &args)?;
            generate(out, *seed, *frames, *tokens, *kv_tokens, *channels, *ref_tokens, *gamma)
        }
        AttnAction::Check { dir, out, tolerance } => {
            write_snapshot(out, "attn-test check", &args)?;
            check(dir, out, *tolerance)
        }
    }
}
