use std::path::Path;

use splat4d_core::camera::Camera;
use splat4d_core::frame::save_png;
use splat4d_core::io::{frame_path, load_checkpoint, load_scene, save_checkpoint, synth_scene, ManifestCamera, Scene, SceneManifest, SynthSpec};
use splat4d_core::metrics::psnr;
use splat4d_core::real::sigmoid;
use splat4d_core::trainer::{anchor_denoiser, normalized_time, render_state, train_dynamic, train_static, TrainConfig, TrainingState};
use splat4d_core::Error;

fn scene(spec: &SynthSpec, dir: &Path) -> Scene {
    load_scene(&synth_scene(spec, dir).unwrap()).unwrap()
}

fn small_config(static_steps: u64, dynamic_steps: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.static_steps = static_steps;
    c.dynamic_steps = dynamic_steps;
    c.sh_degree = 0;
    c.init.count = 200;
    c.densify.interval = 10;
    c
}

fn fit(scene: &Scene, config: &TrainConfig) -> TrainingState {
    let mut st = TrainingState::new(config, scene).unwrap();
    train_static(&mut st, scene, config, |_| {}).unwrap();
    let model = anchor_denoiser(scene);
    train_dynamic(&mut st, scene, config, Some(&model), |_| {}).unwrap();
    st
}

#[test]
fn zero_loss_weights_leave_parameters_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scene(&SynthSpec::translating_blob(), tmp.path());
    let mut c = small_config(5, 5);
    c.rec_weight = 0.0;
    c.mask_weight = 0.0;
    c.mvsds_weight = 0.0;
    let init = TrainingState::new(&c, &sc).unwrap();
    let st = fit(&sc, &c);
    assert_eq!(st.step, 10);
    assert_eq!(st.cloud, init.cloud);
    assert_eq!(st.field, init.field);
}

#[test]
fn black_target_is_fit_by_going_dark() {
    let tmp = tempfile::tempdir().unwrap();
    let (w, h) = (32, 32);
    let cam = Camera::orbit([0.0; 3], 4.0, 0.0, 10.0, w, h, 50.0);
    let manifest = SceneManifest {
        frames_root: "frames".into(),
        timesteps: 1,
        background: [0.0; 3],
        cameras: vec![ManifestCamera::from_camera(0, &cam, false)],
        anchors: None,
        reference_view: None,
    };
    save_png(&frame_path(&tmp.path().join("frames"), 0, 0), w as usize, h as usize, &vec![0.0; (w * h * 3) as usize], None).unwrap();
    let path = tmp.path().join("scene.json");
    manifest.write(&path).unwrap();
    let sc = load_scene(&path).unwrap();

    let mut c = small_config(300, 0);
    c.init.opacity = 0.5;
    let mut st = TrainingState::new(&c, &sc).unwrap();
    let mean_opacity = |st: &TrainingState| st.cloud.opacity_logits.iter().map(|&l| sigmoid(l as f64)).sum::<f64>() / st.cloud.len() as f64;
    let start = mean_opacity(&st);
    train_static(&mut st, &sc, &c, |_| {}).unwrap();
    let first = st.history[0].rec;
    let last = st.history.last().unwrap().rec;
    assert!(last < 0.02 * first, "rec {first} -> {last}");
    assert!(mean_opacity(&st) < start, "opacity {start} -> {}", mean_opacity(&st));
    let out = render_state(&st, &cam, 0.0, [0.0; 3]).unwrap();
    let mean = out.rgb.iter().sum::<f32>() / out.rgb.len() as f32;
    assert!(mean < 0.01, "mean intensity {mean}");
}

#[test]
fn without_dynamic_steps_every_time_renders_the_static_result() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scene(&SynthSpec::translating_blob(), tmp.path());
    let c = small_config(30, 0);
    let st = fit(&sc, &c);
    let cam = &sc.views[0].camera;
    let canonical = splat4d_core::raster::render(&st.cloud.snapshot(), cam, sc.background());
    for t in [0.0, 0.3, 1.0] {
        let out = render_state(&st, cam, t, sc.background()).unwrap();
        assert_eq!(out.rgb, canonical.rgb, "t = {t}");
        assert_eq!(out.alpha, canonical.alpha);
    }
}

#[test]
fn same_seed_gives_identical_loss_history() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scene(&SynthSpec::translating_blob(), tmp.path());
    let c = small_config(15, 15);
    let a = fit(&sc, &c);
    let b = fit(&sc, &c);
    assert_eq!(a.history, b.history);
    assert_eq!(a, b);
    let mut c2 = c.clone();
    c2.seed = 1;
    assert_ne!(fit(&sc, &c2).history, a.history);
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scene(&SynthSpec::translating_blob(), tmp.path());
    let mut c = small_config(10, 10);
    c.views_per_step = 3;
    let pool = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
    let one = pool(1).install(|| fit(&sc, &c));
    let four = pool(4).install(|| fit(&sc, &c));
    assert_eq!(one, four);
}

#[test]
fn checkpoint_round_trip_resumes_bit_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scene(&SynthSpec::translating_blob(), tmp.path().join("scene").as_path());
    let c = small_config(10, 15);
    let model = anchor_denoiser(&sc);

    let mut st = TrainingState::new(&c, &sc).unwrap();
    train_static(&mut st, &sc, &c, |_| {}).unwrap();
    let mut half = c.clone();
    half.dynamic_steps = 5;
    // stop part-way through the dynamic stage; schedules still follow `c`
    while st.step < half.total_steps() {
        splat4d_core::trainer::train_step(&mut st, &sc, &c, splat4d_core::trainer::Stage::Dynamic, Some(&model)).unwrap();
    }
    let path = tmp.path().join("ckpt.a4dc");
    save_checkpoint(&path, &st).unwrap();
    let mut resumed = load_checkpoint(&path).unwrap();
    assert!(resumed.cloud == st.cloud, "cloud");
    assert!(resumed.field == st.field, "field");
    assert!(resumed.gaussian_opt == st.gaussian_opt, "gopt");
    assert!(resumed.field_opt == st.field_opt, "fopt");
    assert!(resumed.stats == st.stats, "stats");
    assert!(resumed.history == st.history, "history");
    assert!((resumed.step, resumed.extent, resumed.seed) == (st.step, st.extent, st.seed), "meta");
    assert_eq!(resumed, st);

    train_dynamic(&mut resumed, &sc, &c, Some(&model), |_| {}).unwrap();
    let straight = fit(&sc, &c);
    assert_eq!(resumed.history, straight.history);
    assert_eq!(resumed, straight);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = scene(&SynthSpec::static16(), tmp.path().join("scene").as_path());
    let st = TrainingState::new(&small_config(1, 0), &sc).unwrap();
    let path = tmp.path().join("ckpt.a4dc");
    save_checkpoint(&path, &st).unwrap();
    let good = std::fs::read(&path).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));

    let mut bad = good.clone();
    bad[4] = 99;
    std::fs::write(&path, &bad).unwrap();
    assert!(load_checkpoint(&path).is_err());

    std::fs::write(&path, &good[..good.len() / 2]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn score_distillation_needs_a_reference_view() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = SynthSpec::translating_blob();
    spec.reference_view = None;
    let sc = scene(&spec, tmp.path());
    let c = small_config(0, 3);
    let mut st = TrainingState::new(&c, &sc).unwrap();
    let model = anchor_denoiser(&sc);
    assert!(matches!(train_dynamic(&mut st, &sc, &c, Some(&model), |_| {}), Err(Error::Config(_))));
}

/// With a single training view, anchors supply the unseen sides.
#[test]
fn score_distillation_improves_unseen_views() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = SynthSpec::translating_blob();
    spec.ring.count = 1;
    let sc = scene(&spec, tmp.path());
    let heldout_psnr = |mvsds_weight: f32| {
        let mut c = small_config(200, 300);
        c.init.count = 300;
        c.densify.interval = 100;
        c.mvsds_weight = mvsds_weight;
        let st = fit(&sc, &c);
        let views: Vec<_> = sc.views.iter().filter(|v| v.holdout).collect();
        views
            .iter()
            .map(|v| {
                let t = normalized_time(v.camera.time_index, sc.timesteps());
                let out = render_state(&st, &v.camera, t, sc.background()).unwrap();
                let rgb: Vec<f32> = out.rgb.iter().map(|x| x.clamp(0.0, 1.0)).collect();
                psnr(&rgb, &v.image.rgb).unwrap()
            })
            .sum::<f64>()
            / views.len() as f64
    };
    let off = heldout_psnr(0.0);
    let on = heldout_psnr(1.0);
    assert!(on > off + 1.0, "held-out PSNR with score distillation {on:.2} dB vs without {off:.2} dB");
}
