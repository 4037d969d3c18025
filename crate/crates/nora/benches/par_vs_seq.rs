//! Criterion comparison of the execution modes on the embarrassingly
//! parallel sweeps: the width-scaling probe (many independent seed/width
//! jobs) and a batch of per-matrix row normalizations. Kernels are
//! sequential in both modes; only the job fan-out differs, so results are
//! identical and only throughput changes.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use nora::exec::{map_indexed, Execution};
use nora::geometry::row_normalize;
use nora::matrix::Matrix;
use nora::rng::Rng;
use nora::tasks::{mup_probe, ProbeDirection};

fn modes() -> [(&'static str, Execution); 2] {
    [
        ("sequential", Execution::Sequential),
        ("parallel", Execution::Parallel),
    ]
}

fn bench_probe(c: &mut Criterion) {
    let mut group = c.benchmark_group("mup_probe");
    group.sample_size(10);
    let widths = [256usize, 512, 1024, 2048];
    let seeds: Vec<u64> = (0..16).collect();
    for (name, mode) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| {
                let recs = mup_probe(
                    black_box(&widths),
                    black_box(&seeds),
                    4,
                    1.0,
                    1.0,
                    ProbeDirection::Nora,
                    mode,
                )
                .unwrap();
                black_box(recs.len())
            })
        });
    }
    group.finish();
}

fn bench_row_normalize_batch(c: &mut Criterion) {
    let mut group = c.benchmark_group("row_normalize_batch");
    group.sample_size(10);
    let mut rng = Rng::from_seed(3);
    let mats: Vec<Matrix> = (0..64)
        .map(|_| Matrix::random_normal(128, 256, 1.0, &mut rng))
        .collect();
    for (name, mode) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| {
                let out = map_indexed(mode, mats.len(), |i| row_normalize(&mats[i], 0.0));
                black_box(out.len())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_probe, bench_row_normalize_batch);
criterion_main!(benches);
