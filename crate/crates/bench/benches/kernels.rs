use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pixeldit::sampler::{initial_noise, integrate, GaussianFlow, SamplerConfig, Solver};
use pixeldit::{Tape, Tensor};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_fwd_bwd");
    for n in [64usize, 128, 256] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let a = Tensor::randn(&[n, n], 1.0, &mut rng);
        let b = Tensor::randn(&[n, n], 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let tape = Tape::new();
                let (x, y) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
                let loss = x.matmul(y).unwrap().sum_all();
                black_box(tape.backward(loss).unwrap());
            })
        });
    }
    group.finish();
}

fn attention_softmax(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scores = Tensor::randn(&[4, 256, 256], 1.0, &mut rng);
    c.bench_function("softmax_4x256x256", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            black_box(tape.constant(scores.clone()).softmax_lastdim().value());
        })
    });
}

fn solvers(c: &mut Criterion) {
    let field = GaussianFlow::new(vec![0.5, -1.0], vec![1.5, 1.5]);
    let x1 = initial_noise(&[1024, 2], 3);
    let mut group = c.benchmark_group("gaussian_solver_32_steps");
    for solver in [Solver::Euler, Solver::Heun, Solver::FlowDpm] {
        let cfg = SamplerConfig { solver, steps: 32, cfg_scale: 1.0, ..SamplerConfig::default() };
        group.bench_function(solver.name(), |bench| {
            bench.iter(|| black_box(integrate(&field, &cfg, x1.clone()).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, attention_softmax, solvers);
criterion_main!(benches);
