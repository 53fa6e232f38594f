use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nafgp::covariance::{matern_matrix, MaternKernel, MaternParams};
use nafgp::exec::{self, Policy};
use nafgp::flow::{FlowConfig, TriangularMap};
use nafgp::likelihood::{evaluate_warped, CovarianceParams};
use nafgp::linalg::Cholesky;

fn points(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, d), |_| rng.random_range(0.0..1.0))
}

fn policies() -> Vec<(&'static str, Policy)> {
    let mut v = vec![("sequential", Policy::Sequential)];
    if cfg!(feature = "parallel") {
        v.push(("parallel", Policy::Parallel));
    }
    v
}

fn covariance_assembly(c: &mut Criterion) {
    let pts = points(400, 2, 1);
    let kernel = MaternKernel::new(MaternParams::new(1.0, 0.2, 1.5).unwrap());
    let mut group = c.benchmark_group("matern_matrix");
    for (name, policy) in policies() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_policy(policy);
            b.iter(|| matern_matrix(pts.view(), &kernel, 0.01))
        });
    }
    group.finish();
}

fn cholesky(c: &mut Criterion) {
    let pts = points(500, 2, 2);
    let kernel = MaternKernel::new(MaternParams::new(1.0, 0.2, 1.5).unwrap());
    let k = matern_matrix(pts.view(), &kernel, 0.01);
    let mut group = c.benchmark_group("cholesky");
    for (name, policy) in policies() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_policy(policy);
            b.iter(|| Cholesky::factor(k.clone()).unwrap())
        });
    }
    group.finish();
}

fn likelihood_and_gradient(c: &mut Criterion) {
    let pts = points(200, 2, 3);
    let z = pts.column(0).mapv(|x| (6.0 * x).sin());
    let map = TriangularMap::new(FlowConfig::standard(2), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let cov = CovarianceParams::new(MaternParams::new(1.0, 0.2, 1.5).unwrap(), 0.1).unwrap();
    let mut group = c.benchmark_group("naf_value_and_gradient");
    group.sample_size(10);
    for (name, policy) in policies() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_policy(policy);
            b.iter(|| {
                let e = evaluate_warped(Some(&map), pts.view(), z.view(), &cov, true).unwrap();
                e.gradients(Some(&map), true, true).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, covariance_assembly, cholesky, likelihood_and_gradient);
criterion_main!(benches);
