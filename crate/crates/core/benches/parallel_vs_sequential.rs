// SPDX-License-Identifier: MIT OR Apache-2.0

//! The same workloads on the default rayon pool and on a one-thread pool.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DVector;
use rayon::ThreadPoolBuilder;

use repdiv::divergence::{full_report, ComparisonSet, DivergenceParams};
use repdiv::numerics::{sinkhorn_divergence, Rng};

fn cloud(rng: &mut Rng, n: usize, dim: usize, shift: f64) -> Vec<DVector<f64>> {
    (0..n).map(|_| rng.normal_vector(dim, shift, 1.0)).collect()
}

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    vec![
        ("parallel", ThreadPoolBuilder::new().build().expect("default pool")),
        ("sequential", ThreadPoolBuilder::new().num_threads(1).build().expect("one-thread pool")),
    ]
}

fn sinkhorn(c: &mut Criterion) {
    let mut rng = Rng::new(7);
    let a = cloud(&mut rng, 300, 18, 0.0);
    let b = cloud(&mut rng, 300, 18, 0.05);
    let mut group = c.benchmark_group("sinkhorn_300x300_d18");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| pool.install(|| sinkhorn_divergence(&a, &b, 0.05, 2).expect("converges")))
        });
    }
    group.finish();
}

fn report(c: &mut Criterion) {
    let mut rng = Rng::new(11);
    let cmp = ComparisonSet {
        natural: cloud(&mut rng, 200, 18, 0.0),
        intervened: cloud(&mut rng, 200, 18, 0.02),
        ground_truth: cloud(&mut rng, 200, 18, 0.0),
    };
    let params = DivergenceParams::default();
    let mut group = c.benchmark_group("full_report_200_d18");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| pool.install(|| full_report(&cmp, &params).expect("report")))
        });
    }
    group.finish();
}

criterion_group!(benches, sinkhorn, report);
criterion_main!(benches);
