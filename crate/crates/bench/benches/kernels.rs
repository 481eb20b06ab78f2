use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use dualda::autodiff::Graph;
use dualda::data::{Dataset, Domain};
use dualda::losses::{draw_projections, swd_with};
use dualda::matrix::Matrix;
use dualda::{TrainConfig, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = uniform(&mut rng, 64, 2048);
    let w = uniform(&mut rng, 2048, 1024);
    c.bench_function("matmul 64x2048x1024", |b| b.iter(|| black_box(x.matmul(&w).unwrap())));
}

fn discrepancy(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = uniform(&mut rng, 64, 65);
    let q = uniform(&mut rng, 64, 65);
    let theta = draw_projections(65, 128, &mut rng);
    c.bench_function("sliced wasserstein fwd+bwd 64x65, 128 proj", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let pv = g.leaf(p.clone(), true);
            let qv = g.leaf(q.clone(), true);
            let s = swd_with(&mut g, pv, qv, &theta).unwrap();
            g.backward(s).unwrap();
            black_box(g.grad(pv).is_some())
        })
    });
}

fn iteration(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, dim, classes) = (512, 2048, 65);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let source = Dataset::new(uniform(&mut rng, n, dim), Some(labels.clone()), Domain::Source, classes).unwrap();
    let target = Dataset::new(uniform(&mut rng, n, dim), Some(labels), Domain::Target, classes).unwrap();
    let cfg = TrainConfig {
        pretrain_iters: 0,
        ..TrainConfig::default()
    };
    let state = TrainState::new(&source, &target, &cfg).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("iteration 2048-1024-512, 65 classes, batch 64", |b| {
        b.iter_batched(
            || state.clone(),
            |mut s| black_box(s.run_iteration(&source, &target).unwrap()),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, matmul, discrepancy, iteration);
criterion_main!(benches);
