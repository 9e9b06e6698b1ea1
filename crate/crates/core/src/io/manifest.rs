use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{Camera, DEFAULT_ZNEAR};
use crate::error::{Error, Result};
use crate::frame::Image;
use crate::par;
use crate::sds::{AnchorSet, AnchorView};

/// Orthonormality tolerance for manifest poses.
pub const RIGIDITY_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestCamera {
    pub view_id: u32,
    pub time_index: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Row-major 4×4.
    pub world_to_camera: [f64; 16],
    /// Excluded from training, kept for evaluation.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub holdout: bool,
}

impl ManifestCamera {
    pub fn from_camera(view_id: u32, cam: &Camera, holdout: bool) -> Self {
        let mut m = [0.0; 16];
        for (i, row) in cam.world_to_camera.iter().enumerate() {
            m[4 * i..4 * i + 4].copy_from_slice(row);
        }
        Self {
            view_id,
            time_index: cam.time_index,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            world_to_camera: m,
            holdout,
        }
    }

    pub fn camera(&self) -> Camera {
        let m = &self.world_to_camera;
        Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            world_to_camera: [0, 1, 2, 3].map(|i| [m[4 * i], m[4 * i + 1], m[4 * i + 2], m[4 * i + 3]]),
            time_index: self.time_index,
            znear: DEFAULT_ZNEAR,
        }
    }

    fn check(&self) -> Result<()> {
        let cam = self.camera();
        let (det, err) = cam.rigidity();
        if err > RIGIDITY_TOL || (det - 1.0).abs() > RIGIDITY_TOL || !det.is_finite() {
            return Err(Error::NonRigid {
                view_id: self.view_id,
                time_index: self.time_index,
                det,
                ortho_err: err,
            });
        }
        if self.width == 0 || self.height == 0 || !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!("camera {}/{}: bad intrinsics", self.view_id, self.time_index)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorManifest {
    pub frames_root: PathBuf,
    pub cameras: Vec<ManifestCamera>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    /// Relative to the manifest's directory.
    pub frames_root: PathBuf,
    pub timesteps: u32,
    #[serde(default = "white")]
    pub background: [f32; 3],
    pub cameras: Vec<ManifestCamera>,
    /// Generated multi-view anchors, same frame layout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<AnchorManifest>,
    /// View whose frames serve as the reference stream for anchored losses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_view: Option<u32>,
}

fn white() -> [f32; 3] {
    [1.0; 3]
}

/// `{root}/{view:03}/{time:04}.png`
pub fn frame_path(root: &Path, view_id: u32, time_index: u32) -> PathBuf {
    root.join(format!("{view_id:03}")).join(format!("{time_index:04}.png"))
}

impl SceneManifest {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: SceneManifest = serde_json::from_str(&text).map_err(|e| Error::format("manifest", format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 || self.cameras.is_empty() {
            return Err(Error::Config("manifest needs at least one camera and one timestep".into()));
        }
        let anchors = self.anchors.iter().flat_map(|a| &a.cameras);
        for c in self.cameras.iter().chain(anchors) {
            c.check()?;
            if c.time_index >= self.timesteps {
                return Err(Error::Config(format!("camera {}: time {} ≥ timesteps {}", c.view_id, c.time_index, self.timesteps)));
            }
        }
        Ok(())
    }

    pub fn view_count(&self) -> usize {
        let mut ids: Vec<u32> = self.cameras.iter().map(|c| c.view_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}

/// One posed frame.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub view_id: u32,
    pub camera: Camera,
    pub image: Image,
    pub holdout: bool,
}

/// Fully loaded scene.
#[derive(Clone, Debug)]
pub struct Scene {
    pub manifest: SceneManifest,
    pub views: Vec<View>,
    /// Anchor views per timestep (empty when the manifest has none).
    pub anchors: Vec<Vec<View>>,
}

impl Scene {
    pub fn timesteps(&self) -> u32 {
        self.manifest.timesteps
    }

    pub fn background(&self) -> [f32; 3] {
        self.manifest.background
    }

    pub fn training_views(&self) -> impl Iterator<Item = &View> {
        self.views.iter().filter(|v| !v.holdout)
    }

    /// Anchor set at `time`, with the reference view's frame when configured.
    pub fn anchor_set(&self, time: u32) -> Option<AnchorSet> {
        let anchors = self.anchors.get(time as usize).filter(|a| !a.is_empty())?;
        let ref_id = self.manifest.reference_view?;
        let reference = self.views.iter().find(|v| v.view_id == ref_id && v.camera.time_index == time)?;
        let view = |v: &View| AnchorView {
            camera: v.camera.clone(),
            image: v.image.clone(),
        };
        Some(AnchorSet {
            anchors: anchors.iter().map(view).collect(),
            reference: view(reference),
        })
    }
}

fn load_views(root: &Path, cams: &[ManifestCamera]) -> Result<Vec<View>> {
    let loaded = par::map_slice(cams, |c| {
        let image = Image::load_png(&frame_path(root, c.view_id, c.time_index))?;
        if image.width != c.width as usize || image.height != c.height as usize {
            return Err(Error::Shape(format!(
                "frame {}/{} is {}×{}, camera says {}×{}",
                c.view_id, c.time_index, image.width, image.height, c.width, c.height
            )));
        }
        Ok(View {
            view_id: c.view_id,
            camera: c.camera(),
            image,
            holdout: c.holdout,
        })
    });
    loaded.into_iter().collect()
}

/// Parses the manifest and decodes every referenced frame.
pub fn load_scene(path: &Path) -> Result<Scene> {
    let manifest = SceneManifest::read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let views = load_views(&base.join(&manifest.frames_root), &manifest.cameras)?;
    let mut anchors = Vec::new();
    if let Some(a) = &manifest.anchors {
        let all = load_views(&base.join(&a.frames_root), &a.cameras)?;
        anchors = (0..manifest.timesteps)
            .map(|t| all.iter().filter(|v| v.camera.time_index == t).cloned().collect())
            .collect();
    }
    Ok(Scene { manifest, views, anchors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_camera_manifest(dir: &Path, rgba: bool) -> PathBuf {
        let cam = Camera::orbit([0.0; 3], 3.0, 0.0, 0.0, 4, 3, 60.0);
        let m = SceneManifest {
            frames_root: "frames".into(),
            timesteps: 1,
            background: [1.0; 3],
            cameras: vec![ManifestCamera::from_camera(0, &cam, false)],
            anchors: None,
            reference_view: None,
        };
        let mask = rgba.then(|| vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        Image::new(4, 3, vec![0.5; 36], mask)
            .unwrap()
            .save_png(&frame_path(&dir.join("frames"), 0, 0))
            .unwrap();
        let p = dir.join("scene.json");
        m.write(&p).unwrap();
        p
    }

    #[test]
    fn minimal_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        let scene = load_scene(&one_camera_manifest(dir.path(), false)).unwrap();
        assert_eq!((scene.manifest.view_count(), scene.timesteps()), (1, 1));
        assert!(scene.views[0].image.mask.is_none());
    }

    #[test]
    fn rgba_alpha_becomes_mask() {
        let dir = tempfile::tempdir().unwrap();
        let scene = load_scene(&one_camera_manifest(dir.path(), true)).unwrap();
        assert_eq!(scene.views[0].image.mask.as_ref().unwrap()[..2], [1.0, 0.0]);
    }

    #[test]
    fn non_rigid_pose_reports_determinant() {
        let dir = tempfile::tempdir().unwrap();
        let p = one_camera_manifest(dir.path(), false);
        let mut m = SceneManifest::read(&p).unwrap();
        m.cameras[0].world_to_camera[1] *= 2.0;
        m.write(&p).unwrap();
        let err = load_scene(&p).unwrap_err();
        assert!(matches!(err, Error::NonRigid { .. }));
        assert!(err.to_string().contains("det ="), "{err}");
    }

    #[test]
    fn missing_frame_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = one_camera_manifest(dir.path(), false);
        fs::remove_file(frame_path(&dir.path().join("frames"), 0, 0)).unwrap();
        let err = load_scene(&p).unwrap_err();
        assert!(err.to_string().contains("000/0000.png"), "{err}");
    }

    #[test]
    fn camera_round_trip_is_exact() {
        let cam = Camera::orbit([0.1, 0.2, 0.3], 3.3, 47.0, 12.0, 64, 48, 55.0).with_time(3);
        let mc = ManifestCamera::from_camera(5, &cam, true);
        let json = serde_json::to_string(&mc).unwrap();
        let back: ManifestCamera = serde_json::from_str(&json).unwrap();
        assert_eq!(back.camera(), cam);
    }
}
