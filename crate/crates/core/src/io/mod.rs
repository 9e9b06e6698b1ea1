//! Scene manifests, synthetic scenes, PLY export and checkpoints.

pub mod checkpoint;
pub mod manifest;
pub mod ply;
pub mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use manifest::{frame_path, load_scene, ManifestCamera, Scene, SceneManifest, View};
pub use ply::{export_ply, read_ply, write_ply};
pub use synth::{synth_scene, Motion, Primitive, Ring, SynthSpec};
