use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mge_core::numerics::Tensor;
use mge_core::pipeline::{Model, PipelineConfig};
use mge_core::warp::{forward_warp, WarpConfig};

fn clip(frames: usize, side: usize) -> Tensor<f32> {
    let n = frames * side * side * 3;
    Tensor::new(&[frames, side, side, 3], (0..n).map(|i| ((i as f32) * 0.37).sin().abs()).collect()).unwrap()
}

/// `T×H×W×k×3` vectors with displacements within ±3 px.
fn vectors(frames: usize, side: usize, k: usize) -> Tensor<f32> {
    let n = frames * side * side * k;
    let data = (0..n)
        .flat_map(|i| {
            let t = i as f32;
            [3.0 * (t * 0.11).sin(), 3.0 * (t * 0.07).cos(), (t * 0.05).sin()]
        })
        .collect();
    Tensor::new(&[frames, side, side, k, 3], data).unwrap()
}

fn bench_warp(c: &mut Criterion) {
    let mut group = c.benchmark_group("warp");
    for side in [64, 128] {
        let (f, p) = (clip(4, side), vectors(4, side, 4));
        group.bench_with_input(BenchmarkId::new("forward_warp", side), &(f, p), |b, (f, p)| {
            b.iter(|| forward_warp(f, p, &WarpConfig::default()).unwrap())
        });
    }
    group.finish();

    let cfg = PipelineConfig {
        dtype: mge_core::pipeline::Dtype::F32,
        ..PipelineConfig::toy()
    };
    let model = Model::<f32>::new(&cfg).unwrap();
    let input = clip(cfg.frames_in, cfg.height);
    c.bench_function("toy_model_predict", |b| b.iter(|| model.predict(&input).unwrap()));
}

criterion_group!(benches, bench_warp);
criterion_main!(benches);
