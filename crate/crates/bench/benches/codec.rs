use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use edgebench_core::wire::{build_payload, decode_frame, encode_frame, parse_payload, Kind, MsgId};

const SIZES: [usize; 2] = [1024, 10240];

fn payload(c: &mut Criterion) {
    let mut g = c.benchmark_group("payload");
    for size in SIZES {
        g.throughput(Throughput::Bytes(size as u64));
        g.bench_with_input(BenchmarkId::new("build", size), &size, |b, &size| {
            let mut seq = 0u32;
            b.iter(|| {
                seq = seq.wrapping_add(1);
                build_payload(MsgId::derive(1, 7, seq), 7, seq, 1_700_000_000_000_000_000, size).unwrap()
            })
        });
        let env = build_payload(MsgId::derive(1, 7, 0), 7, 0, 1, size).unwrap();
        g.bench_with_input(BenchmarkId::new("parse", size), &env.payload, |b, p| {
            b.iter(|| parse_payload(black_box(p)).unwrap())
        });
    }
    g.finish();
}

fn frames(c: &mut Criterion) {
    let mut g = c.benchmark_group("frame");
    for size in SIZES {
        let body = build_payload(MsgId::derive(1, 0, 0), 0, 0, 1, size).unwrap().payload;
        g.throughput(Throughput::Bytes(size as u64));
        g.bench_with_input(BenchmarkId::new("encode", size), &body, |b, body| {
            b.iter(|| encode_frame(Kind::Produce, black_box(body)).unwrap())
        });
        let wire = encode_frame(Kind::Produce, &body).unwrap();
        g.bench_with_input(BenchmarkId::new("decode", size), &wire, |b, wire| {
            b.iter(|| decode_frame(black_box(wire)).unwrap().0)
        });
    }
    g.finish();
}

criterion_group!(benches, payload, frames);
criterion_main!(benches);
