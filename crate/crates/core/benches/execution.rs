use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use homlab::correctors::{moment_scan, CorrectorHierarchy};
use homlab::elliptic::SolverSettings;
use homlab::ensemble::{CoefficientMap, EnsembleSpec, MapKind, Sampler, SpectralCovariance};
use homlab::grid::TorusGrid;
use homlab::par::Execution;

fn spec(dim: usize, side: usize) -> EnsembleSpec {
    EnsembleSpec {
        covariance: SpectralCovariance::stable(1.0, 2.0, 1.0).unwrap(),
        map: CoefficientMap::new(0.25, MapKind::ScalarLogistic, 1.0, 0.0).unwrap(),
        grid: TorusGrid::new(dim, side).unwrap(),
        seed: 1,
    }
}

fn policies() -> [(&'static str, Execution); 2] {
    [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)]
}

/// Multi-index loop inside one hierarchy level.
fn hierarchy(c: &mut Criterion) {
    let s = spec(3, 32);
    let sampler = Sampler::new(s);
    let a = sampler.coefficients(0);
    let mut group = c.benchmark_group("hierarchy_32^3_depth2");
    group.sample_size(10);
    for (name, exec) in policies() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| CorrectorHierarchy::build(&a, sampler.spectral(), 2, SolverSettings::default(), exec).unwrap())
        });
    }
    group.finish();
}

/// Monte Carlo loop over samples.
fn samples(c: &mut Criterion) {
    let s = spec(2, 32);
    let settings = SolverSettings::new(1e-8, 2000).unwrap();
    let mut group = c.benchmark_group("moment_scan_2d_16_samples");
    group.sample_size(10);
    for (name, exec) in policies() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| moment_scan(&s, &[16, 32, 64], 16, settings, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, hierarchy, samples);
criterion_main!(benches);
