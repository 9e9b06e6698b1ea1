//! Binary little-endian PLY in the attribute layout used by common Gaussian
//! splatting viewers: raw (pre-activation) log-scales and opacity logits.

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use crate::deformation::HexPlaneField;
use crate::error::{Error, Result};
use crate::gaussian::GaussianCloud;
use crate::sh;

fn property_names(sh_degree: usize) -> Vec<String> {
    let rest = sh::num_coeffs(sh_degree) - 1;
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"].map(String::from).to_vec();
    names.extend((0..3 * rest).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

pub fn ply_bytes(cloud: &GaussianCloud) -> Vec<u8> {
    let names = property_names(cloud.sh_degree);
    let mut out = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", cloud.len()).into_bytes();
    for n in &names {
        out.extend_from_slice(format!("property float {n}\n").as_bytes());
    }
    out.extend_from_slice(b"end_header\n");
    let b = cloud.coeffs_per_channel();
    for i in 0..cloud.len() {
        let coeffs = cloud.sh_of(i);
        let mut row: Vec<f32> = cloud.positions[i].to_vec();
        row.extend([0.0; 3]);
        row.extend((0..3).map(|c| coeffs[c * b]));
        row.extend((0..3).flat_map(|c| coeffs[c * b + 1..(c + 1) * b].iter().copied()));
        row.push(cloud.opacity_logits[i]);
        row.extend(cloud.log_scales[i]);
        row.extend(cloud.rotations[i]);
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_ply(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, ply_bytes(cloud)).map_err(|e| Error::io(path, e))
}

/// Writes the cloud deformed to normalized time `t`.
pub fn export_ply(path: &Path, cloud: &GaussianCloud, field: &HexPlaneField, t: f32) -> Result<()> {
    write_ply(path, &field.deform(cloud, t)?.to_cloud())
}

pub fn parse_ply(bytes: &[u8]) -> Result<GaussianCloud> {
    let bad = |m: String| Error::format("ply", m);
    let mut reader = BufReader::new(bytes);
    let mut line = String::new();
    let mut count = None;
    let mut props = Vec::new();
    let mut first = true;
    loop {
        line.clear();
        if reader.read_line(&mut line).map_err(|e| bad(e.to_string()))? == 0 {
            return Err(bad("missing end_header".into()));
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if first {
            if tokens != ["ply"] {
                return Err(bad("not a PLY file".into()));
            }
            first = false;
            continue;
        }
        match tokens.as_slice() {
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", other, ..] => return Err(bad(format!("unsupported format {other}"))),
            ["element", "vertex", n] => count = Some(n.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            ["element", other, ..] => return Err(bad(format!("unsupported element {other}"))),
            ["property", "float", name] => props.push(name.to_string()),
            ["property", ty, ..] => return Err(bad(format!("unsupported property type {ty}"))),
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] | [] => {}
            _ => return Err(bad(format!("unexpected header line {:?}", line.trim()))),
        }
    }
    let n = count.ok_or_else(|| bad("no vertex element".into()))?;
    let rest = props.iter().filter(|p| p.starts_with("f_rest_")).count();
    let degree = (0..=sh::MAX_SH_DEGREE)
        .find(|&d| 3 * (sh::num_coeffs(d) - 1) == rest)
        .ok_or_else(|| bad(format!("{rest} f_rest properties match no SH degree")))?;
    let col = |name: &str| props.iter().position(|p| p == name).ok_or_else(|| bad(format!("missing property {name}")));
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload).map_err(|e| bad(e.to_string()))?;
    let stride = props.len();
    if payload.len() != n * stride * 4 {
        return Err(bad(format!("expected {} payload bytes, found {}", n * stride * 4, payload.len())));
    }
    let values: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let idx = |names: &[String]| names.iter().map(|s| col(s)).collect::<Result<Vec<_>>>();
    let pos = idx(&["x", "y", "z"].map(String::from))?;
    let dc = idx(&(0..3).map(|i| format!("f_dc_{i}")).collect::<Vec<_>>())?;
    let fr = idx(&(0..rest).map(|i| format!("f_rest_{i}")).collect::<Vec<_>>())?;
    let op = col("opacity")?;
    let sc = idx(&(0..3).map(|i| format!("scale_{i}")).collect::<Vec<_>>())?;
    let ro = idx(&(0..4).map(|i| format!("rot_{i}")).collect::<Vec<_>>())?;
    let b = sh::num_coeffs(degree);
    let mut cloud = GaussianCloud::empty(degree);
    for i in 0..n {
        let row = &values[i * stride..(i + 1) * stride];
        let mut coeffs = vec![0.0; 3 * b];
        for c in 0..3 {
            coeffs[c * b] = row[dc[c]];
            for k in 1..b {
                coeffs[c * b + k] = row[fr[c * (b - 1) + k - 1]];
            }
        }
        cloud.push(
            [row[pos[0]], row[pos[1]], row[pos[2]]],
            [row[sc[0]], row[sc[1]], row[sc[2]]],
            [row[ro[0]], row[ro[1]], row[ro[2]], row[ro[3]]],
            row[op],
            &coeffs,
        );
    }
    Ok(cloud)
}

pub fn read_ply(path: &Path) -> Result<GaussianCloud> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse_ply(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deformation::FieldConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, degree: usize, seed: u64) -> GaussianCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = GaussianCloud::empty(degree);
        let b = sh::num_coeffs(degree);
        for _ in 0..n {
            let coeffs: Vec<f32> = (0..3 * b).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q = crate::gaussian::normalize_quat(&[rng.random(), rng.random(), rng.random(), rng.random::<f32>() + 0.1]);
            c.push(
                [rng.random(), rng.random(), rng.random()],
                [rng.random(), rng.random(), rng.random()],
                q,
                rng.random_range(-3.0..3.0),
                &coeffs,
            );
        }
        c
    }

    #[test]
    fn round_trip_is_exact() {
        for degree in 0..=3 {
            let c = random_cloud(5, degree, degree as u64);
            assert_eq!(parse_ply(&ply_bytes(&c)).unwrap(), c);
        }
    }

    #[test]
    fn single_gaussian_header() {
        let bytes = ply_bytes(&random_cloud(1, 3, 9));
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.contains("element vertex 1\n"));
        assert!(text.contains("property float f_rest_44\n"));
    }

    #[test]
    fn identity_field_export_equals_canonical() {
        let dir = tempfile::tempdir().unwrap();
        let c = random_cloud(4, 1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let field = HexPlaneField::new(FieldConfig::default(), &mut rng).unwrap();
        export_ply(&dir.path().join("a.ply"), &c, &field, 0.0).unwrap();
        write_ply(&dir.path().join("b.ply"), &c).unwrap();
        assert_eq!(fs::read(dir.path().join("a.ply")).unwrap(), fs::read(dir.path().join("b.ply")).unwrap());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = ply_bytes(&random_cloud(2, 0, 1));
        assert!(parse_ply(&bytes[..bytes.len() - 3]).is_err());
        assert!(parse_ply(b"plx\n").is_err());
    }
}
