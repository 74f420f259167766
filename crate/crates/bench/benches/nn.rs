use std::hint::black_box;

use bilevel_gr::nn::{mlp_backward, mlp_forward, mlp_init, Activation, MlpSpec};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;

fn mlp_passes(c: &mut Criterion) {
    let mut group = c.benchmark_group("mlp_512_rows");
    for width in [64usize, 256] {
        let spec = MlpSpec::new(vec![16, width, width, 2], Activation::LeakyRelu { slope: 0.2 }, Activation::Identity).unwrap();
        let params = mlp_init(&spec, 0).flat;
        let x = DMatrix::from_fn(512, 16, |i, j| ((i * 31 + j * 7) % 13) as f64 / 13.0 - 0.5);
        let up = DMatrix::from_element(512, 2, 1.0 / 512.0);
        group.bench_with_input(BenchmarkId::new("forward", width), &width, |b, _| {
            b.iter(|| mlp_forward(&spec, black_box(&params), &x).unwrap())
        });
        let cache = mlp_forward(&spec, &params, &x).unwrap();
        group.bench_with_input(BenchmarkId::new("backward", width), &width, |b, _| {
            b.iter(|| mlp_backward(&spec, black_box(&params), &cache, &up).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, mlp_passes);
criterion_main!(benches);
