use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use heatdet::benchkit::{synthetic_level, synthetic_proposals};
use heatdet::decoder::propose;
use heatdet::nms::greedy_nms;
use std::hint::black_box;

fn decode_by_area(c: &mut Criterion) {
    let mut g = c.benchmark_group("decode_area");
    g.sample_size(20);
    for side in [64usize, 128, 256, 512] {
        let level = synthetic_level(side, 20, 1);
        let extent = (side * 8) as f64;
        g.throughput(Throughput::Elements((side * side) as u64));
        g.bench_with_input(BenchmarkId::from_parameter(side), &level, |b, level| {
            b.iter(|| propose(black_box(std::slice::from_ref(level)), 256, 0.01, extent, extent).unwrap())
        });
    }
    g.finish();
}

fn decode_by_objects(c: &mut Criterion) {
    let mut g = c.benchmark_group("decode_objects");
    g.sample_size(20);
    for objects in [10usize, 100, 1000] {
        let level = synthetic_level(256, objects, 2);
        g.bench_with_input(BenchmarkId::from_parameter(objects), &level, |b, level| {
            b.iter(|| propose(black_box(std::slice::from_ref(level)), 256, 0.01, 2048.0, 2048.0).unwrap())
        });
    }
    g.finish();
}

fn nms_by_proposals(c: &mut Criterion) {
    let mut g = c.benchmark_group("nms");
    g.sample_size(10);
    for n in [100usize, 1000, 10_000] {
        let proposals = synthetic_proposals(n, 3);
        g.throughput(Throughput::Elements(n as u64));
        g.bench_with_input(BenchmarkId::from_parameter(n), &proposals, |b, p| {
            b.iter(|| greedy_nms(black_box(p), 0.5))
        });
    }
    g.finish();
}

criterion_group!(benches, decode_by_area, decode_by_objects, nms_by_proposals);
criterion_main!(benches);
