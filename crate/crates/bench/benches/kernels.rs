use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dissflow_core::kde::{kde_evaluate, KernelSpec};
use dissflow_core::sdot::{solve_laguerre, LaguerreConfig};
use dissflow_core::transport::{sinkhorn_divergence, w2_assignment, w2_exact_1d, OtMeasure, SinkhornConfig};
use dissflow_core::{BoxDomain, GridDensity, GridLayout, ParticleEnsemble};

fn ensemble(dim: usize, n: usize, seed: u64) -> ParticleEnsemble {
    ParticleEnsemble::uniform(BoxDomain::cube(dim, 0.0, 1.0).unwrap(), n, seed).unwrap()
}

fn exact(c: &mut Criterion) {
    let mut g = c.benchmark_group("exact");
    for n in [64, 256] {
        let (a, b) = (ensemble(2, n, 1), ensemble(2, n, 2));
        g.bench_with_input(BenchmarkId::new("assignment_2d", n), &n, |bch, _| {
            bch.iter(|| w2_assignment(black_box(&a), black_box(&b)).unwrap())
        });
    }
    let (a, b) = (ensemble(1, 10_000, 1), ensemble(1, 10_000, 2));
    g.bench_function("sort_1d_10000", |bch| bch.iter(|| w2_exact_1d(black_box(&a), black_box(&b)).unwrap()));
    g.finish();
}

fn sinkhorn(c: &mut Criterion) {
    let mut g = c.benchmark_group("sinkhorn");
    g.sample_size(10);
    let cfg = SinkhornConfig::with_epsilon(1e-2);
    for n in [500, 2000] {
        let (a, b) = (ensemble(2, n, 3), ensemble(2, n, 4));
        g.bench_with_input(BenchmarkId::new("divergence_2d", n), &n, |bch, _| {
            bch.iter(|| sinkhorn_divergence(OtMeasure::Ensemble(&a), OtMeasure::Ensemble(&b), &cfg).unwrap())
        });
    }
    g.finish();
}

fn kde(c: &mut Criterion) {
    let layout = GridLayout::uniform(BoxDomain::cube(2, 0.0, 1.0).unwrap(), 64).unwrap();
    let kernel = KernelSpec::gaussian(0.05, 2).unwrap();
    let z = ensemble(2, 5000, 5);
    c.bench_function("kde_grid_64x64_n5000", |bch| {
        bch.iter(|| kde_evaluate(black_box(&z), &kernel, &layout).unwrap())
    });
}

fn laguerre(c: &mut Criterion) {
    let mut g = c.benchmark_group("laguerre");
    g.sample_size(10);
    let target = GridDensity::uniform(GridLayout::uniform(BoxDomain::cube(2, 0.0, 1.0).unwrap(), 128).unwrap());
    for n in [16, 64] {
        let sites = ensemble(2, n, 6);
        g.bench_with_input(BenchmarkId::new("uniform_2d", n), &n, |bch, _| {
            bch.iter(|| solve_laguerre(sites.positions().view(), &target, &LaguerreConfig::default(), None).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, exact, sinkhorn, kde, laguerre);
criterion_main!(benches);
