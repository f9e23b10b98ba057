use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nk::families::{random_dataset, random_input, random_params, random_poly_chain, FamilyOptions};
use nk::global_dual::dual_eval_batch;
use nk::kernels::{gram, KernelContext, KernelKind};
use nk::lenk::{representor_sum_with, LenkProblem, DEFAULT_TERM_CAP};
use nk::netgraph::{build_feedforward_relu, initialize, Scheme};
use nk::oracle::{empirical_rademacher, RademacherOptions};
use nk::par::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench_gram(c: &mut Criterion) {
    let sk = build_feedforward_relu(8, &[64, 64, 1]).unwrap();
    let th = initialize(&sk, Scheme::He, 1).unwrap();
    let ctx = KernelContext::plain(&sk, &th).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xs: Vec<DVector<f64>> = (0..24).map(|_| random_input(&mut rng, 8, 1.0)).collect();
    let mut g = c.benchmark_group("ntk_gram_24");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| gram(&ctx, KernelKind::Ntk, black_box(&xs), e).unwrap())
        });
    }
    g.finish();
}

fn bench_dual(c: &mut Criterion) {
    let sk = build_feedforward_relu(8, &[32, 32, 1]).unwrap();
    let th = initialize(&sk, Scheme::He, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xs: Vec<DVector<f64>> = (0..64).map(|_| random_input(&mut rng, 8, 1.0)).collect();
    let mut g = c.benchmark_group("dual_eval_batch_64");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| dual_eval_batch(e, &sk, &th, black_box(&xs), 40).unwrap())
        });
    }
    g.finish();
}

fn bench_rademacher(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let values: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..20).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect())
        .collect();
    let opts = RademacherOptions { trials: 1000, draws: 200, seed: 0 };
    let mut g = c.benchmark_group("empirical_rademacher");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| empirical_rademacher(black_box(&values), opts, e).unwrap())
        });
    }
    g.finish();
}

fn bench_representor(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let opts = FamilyOptions { max_depth: 3, max_width: 4, max_degree: 3, gamma: 0.5 };
    let sk = loop {
        let sk = random_poly_chain(&mut rng, &opts).unwrap();
        if sk.d() == 3 {
            break sk;
        }
    };
    let th = random_params(&mut rng, &sk, 0.5);
    let data = random_dataset(&mut rng, &sk, 2, 0.5).unwrap();
    let p = LenkProblem::new(&sk, &th, &data, 0.1).unwrap();
    let x = random_input(&mut rng, sk.n, 1.0);
    let mut g = c.benchmark_group("representor_sum");
    g.sample_size(20);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| representor_sum_with(&p, black_box(&x), 3, DEFAULT_TERM_CAP, e).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_gram, bench_dual, bench_rademacher, bench_representor);
criterion_main!(benches);
