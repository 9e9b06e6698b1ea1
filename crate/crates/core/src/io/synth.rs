//! Synthetic multi-view videos rendered from known Gaussian primitives.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::frame::save_png;
use crate::gaussian::{normalize_quat, GaussianCloud};
use crate::io::manifest::{frame_path, AnchorManifest, ManifestCamera, SceneManifest};
use crate::io::ply::write_ply;
use crate::par;
use crate::raster::render;
use crate::real::logit;
use crate::sh::SH_C0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub position: [f32; 3],
    /// Standard deviations along the local axes.
    pub scale: [f32; 3],
    #[serde(default = "identity_quat")]
    pub rotation: [f32; 4],
    pub color: [f32; 3],
    pub opacity: f32,
}

fn identity_quat() -> [f32; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

/// Motion from normalized time 0 to 1, linear in `t`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Motion {
    pub translation: [f64; 3],
    /// Rotation about the world z axis through the origin.
    pub rotation_deg: f64,
    /// Final scale multiplier minus one (0 keeps the size).
    pub scale_change: f64,
}

impl Motion {
    pub fn apply(&self, cloud: &GaussianCloud, t: f64) -> GaussianCloud {
        let mut out = cloud.clone();
        let theta = (self.rotation_deg * t).to_radians();
        let (s, c) = theta.sin_cos();
        let half = theta / 2.0;
        let qz = [half.cos() as f32, 0.0, 0.0, half.sin() as f32];
        let dlog = (1.0 + self.scale_change * t).ln() as f32;
        for i in 0..out.len() {
            let p = out.positions[i].map(|v| v as f64);
            let r = [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]];
            out.positions[i] = [0, 1, 2].map(|k| (r[k] + self.translation[k] * t) as f32);
            out.rotations[i] = normalize_quat(&quat_mul(&qz, &out.rotations[i]));
            for v in &mut out.log_scales[i] {
                *v += dlog;
            }
        }
        out
    }
}

fn quat_mul(a: &[f32; 4], b: &[f32; 4]) -> [f32; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Cameras evenly spaced in azimuth around `center`, looking at it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ring {
    pub count: u32,
    pub radius: f64,
    #[serde(default)]
    pub azimuth_offset_deg: f64,
    /// Cycled over the cameras.
    pub elevations_deg: Vec<f64>,
    pub width: u32,
    pub height: u32,
    pub fov_x_deg: f64,
    #[serde(default)]
    pub center: [f64; 3],
}

impl Ring {
    pub fn cameras(&self) -> Vec<Camera> {
        (0..self.count)
            .map(|i| {
                let az = self.azimuth_offset_deg + 360.0 * i as f64 / self.count as f64;
                let el = self.elevations_deg[i as usize % self.elevations_deg.len()];
                Camera::orbit(self.center, self.radius, az, el, self.width, self.height, self.fov_x_deg)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub primitives: Vec<Primitive>,
    #[serde(default)]
    pub motion: Motion,
    pub timesteps: u32,
    pub ring: Ring,
    /// Extra cameras appended after the ring and marked as held out.
    #[serde(default)]
    pub holdout: Option<Ring>,
    /// Six-view anchors rendered per timestep.
    #[serde(default)]
    pub anchors: Option<Ring>,
    #[serde(default)]
    pub reference_view: Option<u32>,
    #[serde(default = "white")]
    pub background: [f32; 3],
}

fn white() -> [f32; 3] {
    [1.0; 3]
}

pub const PRESETS: [&str; 2] = ["static16", "translating-blob"];

impl SynthSpec {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "static16" => Ok(Self::static16()),
            "translating-blob" => Ok(Self::translating_blob()),
            _ => Err(Error::Config(format!("unknown preset {name:?}; expected one of {PRESETS:?}"))),
        }
    }

    /// Sixteen colored anisotropic Gaussians, eight training views and one
    /// held-out view between them.
    pub fn static16() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let primitives = (0..16)
            .map(|_| {
                let hue: f32 = rng.random();
                Primitive {
                    position: [0; 3].map(|_| rng.random_range(-0.5..0.5)),
                    scale: [0; 3].map(|_| rng.random_range(0.08..0.22)),
                    rotation: normalize_quat(&[0; 4].map(|_| rng.random_range(-1.0f32..1.0))),
                    color: hue_color(hue),
                    opacity: rng.random_range(0.7..0.95),
                }
            })
            .collect();
        Self {
            primitives,
            motion: Motion::default(),
            timesteps: 1,
            ring: Ring {
                count: 8,
                radius: 4.0,
                azimuth_offset_deg: 0.0,
                elevations_deg: vec![15.0, -10.0],
                width: 64,
                height: 64,
                fov_x_deg: 40.0,
                center: [0.0; 3],
            },
            holdout: Some(Ring {
                count: 1,
                radius: 4.0,
                azimuth_offset_deg: 22.5,
                elevations_deg: vec![5.0],
                width: 64,
                height: 64,
                fov_x_deg: 40.0,
                center: [0.0; 3],
            }),
            anchors: None,
            reference_view: None,
            background: white(),
        }
    }

    /// A three-Gaussian blob moving by one unit along +x, four training views,
    /// one held-out view and six anchors per timestep.
    pub fn translating_blob() -> Self {
        let blob = |position: [f32; 3], scale: [f32; 3], color: [f32; 3]| Primitive {
            position,
            scale,
            rotation: identity_quat(),
            color,
            opacity: 0.9,
        };
        let ring = |count, offset, els: Vec<f64>| Ring {
            count,
            radius: 4.0,
            azimuth_offset_deg: offset,
            elevations_deg: els,
            width: 64,
            height: 64,
            fov_x_deg: 40.0,
            center: [0.0; 3],
        };
        Self {
            primitives: vec![
                blob([-0.5, 0.0, 0.0], [0.2, 0.15, 0.15], [0.9, 0.2, 0.1]),
                blob([-0.4, 0.15, 0.1], [0.1, 0.1, 0.12], [0.1, 0.7, 0.2]),
                blob([-0.6, -0.1, -0.12], [0.12, 0.08, 0.1], [0.2, 0.3, 0.9]),
            ],
            motion: Motion {
                translation: [1.0, 0.0, 0.0],
                ..Motion::default()
            },
            timesteps: 8,
            ring: ring(4, 45.0, vec![20.0, -10.0]),
            holdout: Some(ring(1, 0.0, vec![5.0])),
            anchors: Some(ring(6, 30.0, vec![10.0])),
            reference_view: Some(0),
            background: white(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() || self.timesteps == 0 || self.ring.count == 0 {
            return Err(Error::Config("synth spec needs primitives, timesteps and cameras".into()));
        }
        for r in [Some(&self.ring), self.holdout.as_ref(), self.anchors.as_ref()].into_iter().flatten() {
            if r.elevations_deg.is_empty() {
                return Err(Error::Config("ring needs at least one elevation".into()));
            }
        }
        Ok(())
    }

    /// Canonical (t = 0) ground-truth cloud, SH degree 0.
    pub fn cloud(&self) -> GaussianCloud {
        let mut c = GaussianCloud::empty(0);
        for p in &self.primitives {
            let dc = p.color.map(|v| (v - 0.5) / SH_C0 as f32);
            c.push(p.position, p.scale.map(f32::ln), normalize_quat(&p.rotation), logit(p.opacity as f64) as f32, &dc);
        }
        c
    }

    pub fn normalized_time(&self, time_index: u32) -> f64 {
        if self.timesteps <= 1 {
            0.0
        } else {
            time_index as f64 / (self.timesteps - 1) as f64
        }
    }

    pub fn cloud_at(&self, time_index: u32) -> GaussianCloud {
        self.motion.apply(&self.cloud(), self.normalized_time(time_index))
    }
}

fn hue_color(h: f32) -> [f32; 3] {
    let f = |n: f32| {
        let k = (n + h * 6.0) % 6.0;
        0.85 - 0.7 * (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [f(5.0), f(3.0), f(1.0)]
}

fn render_all(spec: &SynthSpec, cams: &[(u32, Camera)], root: &Path) -> Result<()> {
    let clouds: Vec<GaussianCloud> = (0..spec.timesteps).map(|t| spec.cloud_at(t)).collect();
    let jobs: Vec<(u32, Camera)> = (0..spec.timesteps)
        .flat_map(|t| cams.iter().map(move |(id, c)| (*id, c.clone().with_time(t))))
        .collect();
    let results = par::map_slice(&jobs, |(id, cam)| {
        let out = render(&clouds[cam.time_index as usize].snapshot(), cam, spec.background);
        save_png(&frame_path(root, *id, cam.time_index), out.width, out.height, &out.rgb, Some(&out.alpha))
    });
    results.into_iter().collect()
}

/// Renders every (view, time) frame of `spec` into `out`, writing
/// `scene.json`, `frames/`, `anchors/` (when requested), `gt.ply` and
/// `synth.json`. Returns the manifest path.
pub fn synth_scene(spec: &SynthSpec, out: &Path) -> Result<std::path::PathBuf> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut views: Vec<(u32, Camera, bool)> = spec.ring.cameras().into_iter().enumerate().map(|(i, c)| (i as u32, c, false)).collect();
    if let Some(h) = &spec.holdout {
        let base = views.len() as u32;
        views.extend(h.cameras().into_iter().enumerate().map(|(i, c)| (base + i as u32, c, true)));
    }
    let plain: Vec<(u32, Camera)> = views.iter().map(|(i, c, _)| (*i, c.clone())).collect();
    render_all(spec, &plain, &out.join("frames"))?;
    let per_time = |cams: &[(u32, Camera, bool)]| -> Vec<ManifestCamera> {
        (0..spec.timesteps)
            .flat_map(|t| cams.iter().map(move |(id, c, h)| ManifestCamera::from_camera(*id, &c.clone().with_time(t), *h)))
            .collect()
    };
    let anchors = match &spec.anchors {
        Some(ring) => {
            let cams: Vec<(u32, Camera, bool)> = ring.cameras().into_iter().enumerate().map(|(i, c)| (i as u32, c, false)).collect();
            let plain: Vec<(u32, Camera)> = cams.iter().map(|(i, c, _)| (*i, c.clone())).collect();
            render_all(spec, &plain, &out.join("anchors"))?;
            Some(AnchorManifest {
                frames_root: "anchors".into(),
                cameras: per_time(&cams),
            })
        }
        None => None,
    };
    let manifest = SceneManifest {
        frames_root: "frames".into(),
        timesteps: spec.timesteps,
        background: spec.background,
        cameras: per_time(&views),
        anchors,
        reference_view: spec.reference_view,
    };
    let path = out.join("scene.json");
    manifest.write(&path)?;
    write_ply(&out.join("gt.ply"), &spec.cloud())?;
    let spec_path = out.join("synth.json");
    fs::write(&spec_path, serde_json::to_string_pretty(spec)? + "\n").map_err(|e| Error::io(&spec_path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::manifest::load_scene;
    use crate::raster::project;

    fn single_blob(timesteps: u32, translation: [f64; 3]) -> SynthSpec {
        let mut s = SynthSpec::translating_blob();
        s.primitives.truncate(1);
        s.primitives[0].position = [0.0; 3];
        s.timesteps = timesteps;
        s.motion.translation = translation;
        s.anchors = None;
        s.reference_view = None;
        s.ring = Ring {
            count: 8,
            ..s.ring
        };
        s.ring.width = 32;
        s.ring.height = 32;
        s.holdout = None;
        s
    }

    #[test]
    fn static_scene_is_time_constant() {
        let dir = tempfile::tempdir().unwrap();
        let scene = load_scene(&synth_scene(&single_blob(3, [0.0; 3]), dir.path()).unwrap()).unwrap();
        assert_eq!(scene.views.len(), 24);
        for v in &scene.views {
            let first = scene.views.iter().find(|w| w.view_id == v.view_id && w.camera.time_index == 0).unwrap();
            assert_eq!(v.image, first.image);
        }
    }

    #[test]
    fn translating_blob_centroid_shift_matches_projection() {
        let spec = single_blob(8, [1.0, 0.0, 0.0]);
        let cam = spec.ring.cameras()[1].clone();
        let centroid = |t: u32| {
            let out = render(&spec.cloud_at(t).snapshot(), &cam, [0.0; 3]);
            let (mut sx, mut sy, mut w) = (0.0, 0.0, 0.0);
            for y in 0..out.height {
                for x in 0..out.width {
                    let a = out.alpha_at(x, y) as f64;
                    sx += a * x as f64;
                    sy += a * y as f64;
                    w += a;
                }
            }
            [sx / w, sy / w]
        };
        let mean2d = |t: u32| project(&spec.cloud_at(t).snapshot(), &cam)[0].mean2d;
        let (c0, c7) = (centroid(0), centroid(7));
        let (p0, p7) = (mean2d(0), mean2d(7));
        for k in 0..2 {
            let moved = c7[k] - c0[k];
            let expected = (p7[k] - p0[k]) as f64;
            // the footprint is symmetric up to perspective skew
            assert!((moved - expected).abs() < 0.25, "axis {k}: {moved} vs {expected}");
        }
        assert!((p7[0] - p0[0]).abs() > 3.0);
    }

    #[test]
    fn frames_match_direct_render() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::static16();
        let scene = load_scene(&synth_scene(&spec, dir.path()).unwrap()).unwrap();
        assert_eq!(scene.views.iter().filter(|v| v.holdout).count(), 1);
        let v = &scene.views[2];
        let out = render(&spec.cloud().snapshot(), &v.camera, spec.background);
        for (a, b) in out.rgb.iter().zip(&v.image.rgb) {
            assert!((a.clamp(0.0, 1.0) - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        let gt = crate::io::ply::read_ply(&dir.path().join("gt.ply")).unwrap();
        assert_eq!(gt, spec.cloud());
    }

    #[test]
    fn occluding_blobs_composite_front_to_back() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = single_blob(1, [0.0; 3]);
        let blob = |x: f32, color: [f32; 3]| Primitive {
            position: [x, 0.0, 0.0],
            scale: [0.05; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            color,
            opacity: 0.5,
        };
        spec.primitives = vec![blob(-1.0, [0.0, 0.0, 1.0]), blob(1.0, [1.0, 0.0, 0.0])];
        spec.background = [0.0; 3];
        spec.ring.count = 1;
        spec.ring.elevations_deg = vec![0.0];
        spec.ring.azimuth_offset_deg = 0.0;
        let scene = load_scene(&synth_scene(&spec, dir.path()).unwrap()).unwrap();
        let img = &scene.views[0].image;
        let (cx, cy) = (img.width / 2, img.height / 2);
        let px = &img.rgb[3 * (cy * img.width + cx)..][..3];
        // red at 0.5 over blue at 0.5 over black
        for (got, want) in px.iter().zip([0.5, 0.0, 0.25]) {
            assert!((got - want).abs() <= 1.0 / 255.0, "{px:?}");
        }
    }

    #[test]
    fn cameras_round_trip_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let spec = single_blob(1, [0.0; 3]);
        let scene = load_scene(&synth_scene(&spec, dir.path()).unwrap()).unwrap();
        for (v, c) in scene.views.iter().zip(spec.ring.cameras()) {
            assert_eq!(v.camera, c);
        }
    }

    #[test]
    fn anchors_are_loaded_per_timestep() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SynthSpec::translating_blob();
        spec.timesteps = 2;
        let scene = load_scene(&synth_scene(&spec, dir.path()).unwrap()).unwrap();
        assert_eq!(scene.anchors.len(), 2);
        let set = scene.anchor_set(1).unwrap();
        assert_eq!(set.anchors.len(), 6);
        assert_eq!(set.reference.camera.time_index, 1);
    }

    #[test]
    fn unknown_preset_is_rejected() {
        assert!(SynthSpec::preset("nope").is_err());
    }
}
