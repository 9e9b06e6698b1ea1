//! Binary checkpoint: magic `A4DC`, u32 version, u64 step, u32 array count,
//! then named little-endian float32 arrays, each as
//! `u32 name length, name bytes, u32 rank, u64 dims…, f32 data…`.
//! Integers and f64 values that must survive exactly are stored as 16-bit
//! words, one word per float.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::deformation::{FieldConfig, HexPlaneField, Linear, Mlp, DECODER_OUTPUTS};
use crate::densify::DensifyStats;
use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;
use crate::optim::{Adam, FieldOptimizer, GaussianOptimizer};
use crate::sh;
use crate::trainer::{LossRecord, TrainingState};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"A4DC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub dims: Vec<u64>,
    pub data: Vec<f32>,
}

fn words(v: u64) -> [f32; 4] {
    [0, 1, 2, 3].map(|i| ((v >> (16 * i)) & 0xffff) as f32)
}

fn from_words(w: &[f32]) -> Result<u64> {
    if !w.len().is_multiple_of(4) || w.iter().any(|x| !(x.fract() == 0.0 && (0.0..65536.0).contains(x))) {
        return Err(Error::format("checkpoint", "bad integer encoding"));
    }
    Ok(w.iter().take(4).enumerate().map(|(i, &x)| (x as u64) << (16 * i)).sum())
}

fn encode_f64s(v: &[f64]) -> Array {
    Array {
        dims: vec![v.len() as u64, 4],
        data: v.iter().flat_map(|x| words(x.to_bits())).collect(),
    }
}

fn decode_f64s(a: &Array) -> Result<Vec<f64>> {
    a.data.chunks(4).map(|c| from_words(c).map(f64::from_bits)).collect()
}

struct Writer {
    arrays: Vec<(String, Array)>,
}

impl Writer {
    fn put(&mut self, name: impl Into<String>, dims: &[usize], data: Vec<f32>) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.arrays.push((
            name.into(),
            Array {
                dims: dims.iter().map(|&d| d as u64).collect(),
                data,
            },
        ));
    }

    fn put_u64(&mut self, name: &str, v: u64) {
        self.put(name, &[4], words(v).to_vec());
    }

    fn put_adam(&mut self, prefix: &str, a: &Adam) {
        self.put(format!("{prefix}.m"), &[a.m.len()], a.m.clone());
        self.put(format!("{prefix}.v"), &[a.v.len()], a.v.clone());
        self.put_u64(&format!("{prefix}.steps"), a.steps);
    }
}

fn field_meta(c: &FieldConfig) -> Vec<f64> {
    let mut v = vec![c.features as f64, c.levels as f64, c.base_resolution as f64];
    v.extend(c.bounds_min.iter().chain(&c.bounds_max));
    v.extend([c.hidden_width as f64, c.hidden_layers as f64]);
    v.extend(c.spatial_init);
    v
}

fn field_config_from(v: &[f64]) -> Result<FieldConfig> {
    if v.len() != 13 {
        return Err(Error::format("checkpoint", "field config has wrong length"));
    }
    Ok(FieldConfig {
        features: v[0] as usize,
        levels: v[1] as usize,
        base_resolution: v[2] as usize,
        bounds_min: [v[3], v[4], v[5]],
        bounds_max: [v[6], v[7], v[8]],
        hidden_width: v[9] as usize,
        hidden_layers: v[10] as usize,
        spatial_init: [v[11], v[12]],
    })
}

pub fn checkpoint_bytes(state: &TrainingState) -> Vec<u8> {
    let mut w = Writer { arrays: Vec::new() };
    let c = &state.cloud;
    let n = c.len();
    let b = c.coeffs_per_channel();
    w.put_u64("meta.seed", state.seed);
    w.put("meta.sh_degree", &[1], vec![c.sh_degree as f32]);
    w.put("meta.extent", &[1], vec![state.extent]);
    w.arrays.push(("meta.field".into(), encode_f64s(&field_meta(&state.field.config))));
    w.put("cloud.positions", &[n, 3], c.positions.as_flattened().to_vec());
    w.put("cloud.log_scales", &[n, 3], c.log_scales.as_flattened().to_vec());
    w.put("cloud.rotations", &[n, 4], c.rotations.as_flattened().to_vec());
    w.put("cloud.opacity_logits", &[n], c.opacity_logits.clone());
    w.put("cloud.sh_coeffs", &[n, 3, b], c.sh_coeffs.clone());
    for (name, t) in state.field.named_tensors() {
        w.put(name, &[t.len()], t.to_vec());
    }
    for (name, a) in state.gaussian_opt.tensors() {
        w.put_adam(&format!("adam.cloud.{name}"), a);
    }
    for (i, a) in state.field_opt.states.iter().enumerate() {
        w.put_adam(&format!("adam.field.{i}"), a);
    }
    for (name, v) in [
        ("densify.accum_grad", &state.stats.accum_grad),
        ("densify.denom", &state.stats.denom),
        ("densify.max_radius", &state.stats.max_radius),
    ] {
        let a = encode_f64s(v);
        w.arrays.push((name.into(), a));
    }
    let h = &state.history;
    w.put(
        "history.step",
        &[h.len(), 4],
        h.iter().flat_map(|r| words(r.step)).collect(),
    );
    w.put(
        "history.losses",
        &[h.len(), 4],
        h.iter().flat_map(|r| [r.total, r.rec, r.mask, r.mvsds]).collect(),
    );

    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&(w.arrays.len() as u32).to_le_bytes());
    for (name, a) in &w.arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(a.dims.len() as u32).to_le_bytes());
        for d in &a.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("checkpoint", "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Header step plus every named array.
pub fn parse_arrays(bytes: &[u8]) -> Result<(u64, BTreeMap<String, Array>)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic (expected A4DC)"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let step = c.u64()?;
    let count = c.u32()?;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| Error::format("checkpoint", "array name is not UTF-8"))?;
        let rank = c.u32()? as usize;
        let dims = (0..rank).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
        let n: u64 = dims.iter().product();
        let data = c.take(4 * n as usize)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        arrays.insert(name, Array { dims, data });
    }
    if c.pos != bytes.len() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    Ok((step, arrays))
}

struct Reader {
    arrays: BTreeMap<String, Array>,
}

impl Reader {
    fn get(&mut self, name: &str) -> Result<Array> {
        self.arrays.remove(name).ok_or_else(|| Error::format("checkpoint", format!("missing array {name}")))
    }

    fn data(&mut self, name: &str, len: usize) -> Result<Vec<f32>> {
        let a = self.get(name)?;
        if a.data.len() != len {
            return Err(Error::format("checkpoint", format!("{name} has {} values, expected {len}", a.data.len())));
        }
        Ok(a.data)
    }

    fn u64(&mut self, name: &str) -> Result<u64> {
        from_words(&self.data(name, 4)?)
    }

    fn adam(&mut self, prefix: &str, len: usize) -> Result<Adam> {
        Ok(Adam {
            m: self.data(&format!("{prefix}.m"), len)?,
            v: self.data(&format!("{prefix}.v"), len)?,
            steps: self.u64(&format!("{prefix}.steps"))?,
        })
    }
}

fn triples<const K: usize>(v: Vec<f32>) -> Vec<[f32; K]> {
    v.chunks_exact(K).map(|c| c.try_into().unwrap()).collect()
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<TrainingState> {
    let (step, arrays) = parse_arrays(bytes)?;
    let mut r = Reader { arrays };
    let seed = r.u64("meta.seed")?;
    let sh_degree = r.data("meta.sh_degree", 1)?[0] as usize;
    if sh_degree > sh::MAX_SH_DEGREE {
        return Err(Error::format("checkpoint", format!("sh degree {sh_degree}")));
    }
    let extent = r.data("meta.extent", 1)?[0];
    let config = field_config_from(&decode_f64s(&r.get("meta.field")?)?)?;
    config.validate()?;
    let n = r.get("cloud.opacity_logits")?.data;
    let count = n.len();
    let b = sh::num_coeffs(sh_degree);
    let cloud = GaussianCloud {
        positions: triples(r.data("cloud.positions", 3 * count)?),
        log_scales: triples(r.data("cloud.log_scales", 3 * count)?),
        rotations: triples(r.data("cloud.rotations", 4 * count)?),
        opacity_logits: n,
        sh_coeffs: r.data("cloud.sh_coeffs", 3 * b * count)?,
        sh_degree,
    };
    cloud.validate()?;

    let f = config.features;
    let planes = (0..config.levels)
        .flat_map(|l| (0..6).map(move |p| (l, p)))
        .map(|(l, p)| {
            let res = config.resolution(l);
            r.data(&format!("field.plane.{l}.{p}"), res * res * f)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut decoders = Vec::new();
    for (k, &out) in DECODER_OUTPUTS.iter().enumerate() {
        let mut dims = vec![config.feature_dim()];
        dims.extend(std::iter::repeat_n(config.hidden_width, config.hidden_layers));
        dims.push(out);
        let layers = (0..dims.len() - 1)
            .map(|j| {
                Ok(Linear {
                    inputs: dims[j],
                    outputs: dims[j + 1],
                    weight: r.data(&format!("field.decoder.{k}.{j}.weight"), dims[j] * dims[j + 1])?,
                    bias: r.data(&format!("field.decoder.{k}.{j}.bias"), dims[j + 1])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        decoders.push(Mlp { layers });
    }
    let mut field = HexPlaneField {
        config,
        planes,
        decoders: decoders.try_into().map_err(|_| Error::format("checkpoint", "decoder count"))?,
    };

    let cloud_lens = [3 * count, 3 * count, 4 * count, count, 3 * b * count];
    let mut g = GaussianOptimizer::new(&cloud);
    for ((name, a), len) in g.tensors_mut().into_iter().zip(cloud_lens) {
        *a = r.adam(&format!("adam.cloud.{name}"), len)?;
    }
    let lens: Vec<usize> = field.tensors_mut().iter().map(|(_, t)| t.len()).collect();
    let states = lens
        .iter()
        .enumerate()
        .map(|(i, &len)| r.adam(&format!("adam.field.{i}"), len))
        .collect::<Result<Vec<_>>>()?;

    let mut stat = |name: &str| -> Result<Vec<f64>> {
        let v = decode_f64s(&r.get(name)?)?;
        if v.len() != count {
            return Err(Error::format("checkpoint", format!("{name} has {} rows for {count} gaussians", v.len())));
        }
        Ok(v)
    };
    let stats = DensifyStats {
        accum_grad: stat("densify.accum_grad")?,
        denom: stat("densify.denom")?,
        max_radius: stat("densify.max_radius")?,
    };
    let steps = r.get("history.step")?;
    let losses = r.get("history.losses")?;
    if steps.data.len() != losses.data.len() {
        return Err(Error::format("checkpoint", "history arrays disagree"));
    }
    let history = steps
        .data
        .chunks_exact(4)
        .zip(losses.data.chunks_exact(4))
        .map(|(s, l)| {
            Ok(LossRecord {
                step: from_words(s)?,
                total: l[0],
                rec: l[1],
                mask: l[2],
                mvsds: l[3],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingState {
        cloud,
        field,
        gaussian_opt: g,
        field_opt: FieldOptimizer { states },
        stats,
        step,
        extent,
        seed,
        history,
    })
}

pub fn save_checkpoint(path: &Path, state: &TrainingState) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write then rename so an interrupted save never clobbers the last good one
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, checkpoint_bytes(state)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainingState> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
