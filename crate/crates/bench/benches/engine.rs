use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use priorfit_core::synth::{self, SynthSpec};
use priorfit_core::{losses, zeroshot, Adapter, Head};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn uniform(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0.0..100.0)).collect()
}

fn losses_bench(c: &mut Criterion) {
    let mut group = c.benchmark_group("wasserstein_1d");
    for b in [128usize, 1024, 8192] {
        let (pred, prior) = (uniform(b, 1), uniform(b, 2));
        group.bench_with_input(BenchmarkId::from_parameter(b), &b, |bench, _| {
            bench.iter(|| losses::wasserstein_1d(black_box(&pred), black_box(&prior)).unwrap())
        });
    }
    group.finish();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut probs = Array2::from_shape_fn((512, 1000), |_| rng.random_range(0.01..1.0));
    for mut row in probs.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    let prior = vec![1e-3; 1000];
    c.bench_function("kl_batch 512x1000", |b| {
        b.iter(|| losses::kl_batch(black_box(probs.view()), black_box(&prior)).unwrap())
    });
}

fn adapter_bench(c: &mut Criterion) {
    let adapter = Adapter::init(&[512, 256, 1], Head::ScalarRegression, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Array2::from_shape_fn((128, 512), |_| rng.random_range(-1.0..1.0));
    let grad_out = Array2::from_elem((128, 1), 1.0 / 128.0);
    c.bench_function("forward 128x512", |b| b.iter(|| adapter.forward(black_box(x.view())).unwrap()));
    c.bench_function("forward+backward 128x512", |b| {
        b.iter(|| {
            let cache = adapter.forward(black_box(x.view())).unwrap();
            adapter.backward(&cache, grad_out.view()).unwrap()
        })
    });
}

fn assign_bench(c: &mut Criterion) {
    let fixture = synth::generate(&SynthSpec::regression_default()).unwrap();
    c.bench_function("zeroshot assign 2000x100", |b| {
        b.iter(|| zeroshot::assign(black_box(&fixture.dataset), black_box(&fixture.captions)).unwrap())
    });
}

criterion_group!(benches, losses_bench, adapter_bench, assign_bench);
criterion_main!(benches);
