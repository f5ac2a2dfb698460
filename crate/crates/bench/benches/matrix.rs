use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use netsd_bench::{calibrate, expected_mbps, run_cell, Anchors, BenchConfig, MatrixConfig, SearchSpace};
use netsd_core::bus::{BusModel, Direction};

fn cells(c: &mut Criterion) {
    let m = MatrixConfig {
        total_bytes: 1 << 20,
        ..Default::default()
    };
    let mut g = c.benchmark_group("cell_1MiB");
    g.sample_size(10);
    for (dir, config) in [
        (Direction::Read, BenchConfig::Baseline),
        (Direction::Read, BenchConfig::SwitchNoPullups),
        (Direction::Write, BenchConfig::SwitchNoPullups),
    ] {
        g.bench_function(format!("{dir}_{config}_64K"), |b| {
            b.iter(|| run_cell(&m, dir, 64 << 10, config).unwrap())
        });
    }
    g.finish();
}

fn model(c: &mut Criterion) {
    let bus = BusModel::default();
    c.bench_function("expected_mbps", |b| {
        b.iter(|| {
            expected_mbps(
                black_box(&bus),
                BenchConfig::SwitchNoPullups,
                Direction::Write,
                black_box(32 << 10),
                64 << 10,
            )
        })
    });
    let mut g = c.benchmark_group("calibrate");
    g.sample_size(10);
    g.bench_function("default_space", |b| {
        b.iter(|| calibrate(&Anchors::default(), &SearchSpace::default()).unwrap())
    });
    g.finish();
}

criterion_group!(benches, cells, model);
criterion_main!(benches);
