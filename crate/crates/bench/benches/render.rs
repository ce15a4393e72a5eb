use criterion::{black_box, criterion_group, criterion_main, Criterion};
use splatbev_core::bev::{render_bev_features, BevConfig};
use splatbev_core::grad::{render_backward, RenderUpstream};
use splatbev_core::raster::{render_naive_oracle, render_with, RenderConfig};
use splatbev_core::synth::{generate_scene, SceneSpec};

fn benches(c: &mut Criterion) {
    let (scene, _) = generate_scene(&SceneSpec::with_seed(7)).expect("scene");
    let cam = SceneSpec::default().rig.cameras().expect("rig")[0].clone();
    let tiled = RenderConfig::default();

    c.bench_function("forward/tiled", |b| b.iter(|| render_with(black_box(&scene), &cam, &tiled).unwrap()));
    c.bench_function("forward/exact", |b| b.iter(|| render_with(black_box(&scene), &cam, &RenderConfig::exact()).unwrap()));

    let out = render_with(&scene, &cam, &tiled).unwrap();
    let mut up = RenderUpstream::zeros_like(&out);
    if let Some(m) = up.color.as_mut() {
        m.data.fill(1.0);
    }
    c.bench_function("backward", |b| b.iter(|| render_backward(black_box(&scene), &cam, &up).unwrap()));

    let bev = BevConfig::default();
    c.bench_function("bev/features", |b| b.iter(|| render_bev_features(black_box(&scene), &bev).unwrap()));

    let mut slow = c.benchmark_group("oracle");
    slow.sample_size(10);
    slow.bench_function("naive", |b| b.iter(|| render_naive_oracle(black_box(&scene), &cam).unwrap()));
    slow.finish();
}

criterion_group!(render, benches);
criterion_main!(render);
