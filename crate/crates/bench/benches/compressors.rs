use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gravac_core::compress::{compress, compress_further};
use gravac_core::{CompressorKind, SeededRng};

const M: usize = 1 << 20;

fn direct(c: &mut Criterion) {
    let mut rng = SeededRng::new(7);
    let g = rng.normal_gradient(M);
    let mut group = c.benchmark_group("compress_1m");
    group.sample_size(20);
    for kind in [
        CompressorKind::TopK,
        CompressorKind::dgc(),
        CompressorKind::redsync(),
        CompressorKind::RandomK,
    ] {
        for cf in [10.0, 1000.0] {
            group.bench_with_input(BenchmarkId::new(kind.name(), cf), &cf, |b, &cf| {
                b.iter(|| compress(&kind, black_box(&g), cf, &mut rng).unwrap())
            });
        }
    }
    group.finish();
}

fn multilevel(c: &mut Criterion) {
    let mut rng = SeededRng::new(8);
    let g = rng.normal_gradient(M);
    let first = compress(&CompressorKind::TopK, &g, 10.0, &mut rng).unwrap();
    let mut group = c.benchmark_group("topk_to_1000x");
    group.sample_size(20);
    group.bench_function("direct", |b| {
        b.iter(|| compress(&CompressorKind::TopK, black_box(&g), 1000.0, &mut rng).unwrap())
    });
    group.bench_function("from_10x", |b| {
        b.iter(|| {
            compress_further(&CompressorKind::TopK, black_box(&first), 100.0, &mut rng).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, direct, multilevel);
criterion_main!(benches);
