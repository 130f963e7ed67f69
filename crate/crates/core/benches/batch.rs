use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mama_core::sim::batch::{generate_many, verify_many, verify_many_sequential};
use mama_core::sim::gen::GenParams;

fn bench_verify(c: &mut Criterion) {
    let mut group = c.benchmark_group("verify");
    group.sample_size(10);
    for count in [16u64, 128] {
        let scenarios = generate_many(0, count, GenParams::default());
        group.bench_with_input(BenchmarkId::new("sequential", count), &scenarios, |b, s| {
            b.iter(|| verify_many_sequential(black_box(s)))
        });
        // Identical to the sequential path when built without `parallel`.
        group.bench_with_input(BenchmarkId::new("parallel", count), &scenarios, |b, s| {
            b.iter(|| verify_many(black_box(s)))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_verify);
criterion_main!(benches);
