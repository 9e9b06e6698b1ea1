//! Rayon pool versus a single worker on the hot paths. Build with
//! `--no-default-features` to measure the plain sequential code instead.

use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::ThreadPool;
use splat4d_core::deformation::FieldConfig;
use splat4d_core::{par, render, render_backward, Camera, GaussianCloud, HexPlaneField};

fn cloud(n: usize) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut c = GaussianCloud::empty(3);
    for _ in 0..n {
        let p = [0; 3].map(|_| rng.random_range(-1.0f32..1.0));
        let q = [1.0, rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 0.0];
        let sh: Vec<f32> = (0..48).map(|_| rng.random_range(-0.3..0.3)).collect();
        c.push(p, [rng.random_range(-4.0..-2.5); 3], splat4d_core::gaussian::normalize_quat(&q), rng.random_range(-2.0..2.0), &sh);
    }
    c
}

fn pools() -> Vec<(&'static str, ThreadPool)> {
    let build = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
    let mut v = vec![("one-thread", build(1))];
    if par::is_parallel() {
        v.push(("pool", build(0)));
    }
    v
}

fn raster(c: &mut Criterion) {
    let cloud = cloud(5000);
    let cam = Camera::orbit([0.0; 3], 4.0, 30.0, 15.0, 256, 256, 50.0);
    let snap = cloud.snapshot();
    let d_rgb = vec![1.0f32; 256 * 256 * 3];
    let mut group = c.benchmark_group("raster_5000_256px");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("forward", name), |b| b.iter(|| pool.install(|| black_box(render(&snap, &cam, [1.0; 3])))));
        group.bench_function(BenchmarkId::new("forward_backward", name), |b| {
            b.iter(|| {
                pool.install(|| {
                    let mut out = render(&snap, &cam, [1.0; 3]);
                    black_box(render_backward(&snap, &mut out, &d_rgb, &[]))
                })
            })
        });
    }
    group.finish();
}

fn deformation(c: &mut Criterion) {
    let cloud = cloud(5000);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let field = HexPlaneField::new(FieldConfig::default(), &mut rng).unwrap();
    let mut group = c.benchmark_group("hexplane_5000");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("deform", name), |b| b.iter(|| pool.install(|| black_box(field.deform(&cloud, 0.4).unwrap().len()))));
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10).measurement_time(Duration::from_secs(5));
    targets = raster, deformation
}
criterion_main!(benches);
