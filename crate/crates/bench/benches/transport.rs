use attnflow_core::measures::wasserstein2;
use attnflow_bench::cloud;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn exact_w2(c: &mut Criterion) {
    let mut g = c.benchmark_group("exact W2, uniform clouds");
    for n in [8, 32, 128] {
        let (a, b) = (cloud(1, 3, n, 0.5), cloud(2, 3, n, 0.5));
        g.bench_with_input(BenchmarkId::from_parameter(n), &(a, b), |bch, (a, b)| {
            bch.iter(|| wasserstein2(a, b))
        });
    }
    g.finish();
}

criterion_group!(benches, exact_w2);
criterion_main!(benches);
