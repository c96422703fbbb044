use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use crocodile::linalg::singular_values;
use crocodile::losses::{covloss, covloss_sampled};
use crocodile::{PairSet, Tape, Tensor};

fn filled(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 256, 1024] {
        let a = filled(&[n, 64], 1);
        let b = filled(&[64, 32], 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let x = tape.constant(a.clone());
                let w = tape.constant(b.clone());
                black_box(tape.matmul(x, w).unwrap());
            })
        });
    }
    group.finish();
}

fn covloss_full_vs_sampled(c: &mut Criterion) {
    let experts: Vec<Tensor> = (0..4).map(|k| filled(&[1024, 16], 10 + k)).collect();
    let mut group = c.benchmark_group("covloss");
    group.bench_function("full", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let vars: Vec<_> = experts.iter().map(|e| tape.param(e.clone())).collect();
            let loss = covloss(&mut tape, &vars, PairSet::StrictCross).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
    for n_sub in [32, 128] {
        group.bench_with_input(BenchmarkId::new("sampled", n_sub), &n_sub, |bench, &n_sub| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let vars: Vec<_> = experts.iter().map(|e| tape.param(e.clone())).collect();
                let loss = covloss_sampled(&mut tape, &vars, PairSet::StrictCross, n_sub, 7).unwrap();
                black_box(tape.backward(loss).unwrap());
            })
        });
    }
    group.finish();
}

fn svd(c: &mut Criterion) {
    let mut group = c.benchmark_group("singular_values");
    for d in [16, 32, 64] {
        let table = filled(&[2000, d], 3);
        group.bench_with_input(BenchmarkId::from_parameter(d), &d, |bench, _| {
            bench.iter(|| black_box(singular_values(&table).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, covloss_full_vs_sampled, svd);
criterion_main!(benches);
