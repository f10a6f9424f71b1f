use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ssn_core::rng::{stream, tag};
use ssn_core::{Graph, Padding, Tensor};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    for &(ch, hw, k) in &[(16, 16, 3), (32, 32, 3), (64, 8, 1)] {
        let mut rng = stream(0, &[tag("bench")]);
        let x = Tensor::randn(&[4, ch, hw, hw], &mut rng);
        let w = Tensor::randn(&[ch, ch, k, k], &mut rng);
        let id = format!("{ch}x{hw}x{hw}_k{k}");
        group.bench_with_input(BenchmarkId::new("forward", &id), &(), |b, _| {
            b.iter(|| black_box(&x).conv2d(black_box(&w), Padding::Zero).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", &id), &(), |b, _| {
            b.iter(|| {
                let g = Graph::new();
                let xv = g.leaf(x.clone());
                let wv = g.leaf(w.clone());
                let loss = xv.conv2d(wv, Padding::Circular).unwrap().square().sum();
                g.backward(loss, &[xv, wv]).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv);
criterion_main!(benches);
