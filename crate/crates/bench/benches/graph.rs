use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mge_core::graph::{build_edges, init_dynamic_vectors, EdgeKinds};
use mge_core::numerics::Tensor;

/// Smooth, deterministic `T×Hs×Ws×C` features.
fn features(frames: usize, side: usize, channels: usize) -> Tensor<f32> {
    let n = frames * side * side * channels;
    let data = (0..n).map(|i| ((i as f32) * 0.618).sin() + 0.1 * (i % 7) as f32).collect();
    Tensor::new(&[frames, side, side, channels], data).unwrap()
}

fn bench_graph(c: &mut Criterion) {
    let mut group = c.benchmark_group("graph");
    for side in [16, 32] {
        let f = features(4, side, 16);
        group.bench_with_input(BenchmarkId::new("build_edges", side * side), &f, |b, f| {
            b.iter(|| build_edges(f, 8, 1e-8, EdgeKinds::ALL).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("dynamic_vectors", side * side), &f, |b, f| {
            b.iter(|| init_dynamic_vectors(f, 8, 1e-8).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_graph);
criterion_main!(benches);
