//! Efficient versus dot-product attention, forward and forward plus backward.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rgbd_fusion::attention::{dot_product_attention, efficient_attention};
use rgbd_fusion::{Tape, Tensor};

const C: usize = 32;

fn input(n: usize, phase: f32) -> Tensor<f32> {
    let data = (0..n * C).map(|i| ((i as f32) * 0.37 + phase).sin()).collect();
    Tensor::new(&[n, C], data).unwrap()
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention_forward");
    for n in [256, 512, 1024, 2048] {
        let (q, k, v) = (input(n, 0.0), input(n, 1.0), input(n, 2.0));
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::new("efficient", n), &n, |b, _| {
            b.iter(|| {
                let mut t = Tape::new();
                let (q, k, v) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
                black_box(efficient_attention(&mut t, q, k, v).unwrap())
            })
        });
        group.bench_with_input(BenchmarkId::new("dot_product", n), &n, |b, _| {
            b.iter(|| {
                let mut t = Tape::new();
                let (q, k, v) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
                black_box(dot_product_attention(&mut t, q, k, v).unwrap())
            })
        });
    }
    group.finish();

    let mut group = c.benchmark_group("attention_backward");
    for n in [256, 1024] {
        let (q, k, v) = (input(n, 0.0), input(n, 1.0), input(n, 2.0));
        group.bench_with_input(BenchmarkId::new("efficient", n), &n, |b, _| {
            b.iter(|| {
                let mut t = Tape::new();
                let (q, k, v) = (t.param(q.clone()), t.param(k.clone()), t.param(v.clone()));
                let y = efficient_attention(&mut t, q, k, v).unwrap();
                let s = t.sum(y);
                black_box(t.backward(s).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, attention);
criterion_main!(benches);
