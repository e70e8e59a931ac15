use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use lsopt_bench::{fixture, indicators};
use lsopt_core::vi_solver::assemble_coupled;
use lsopt_core::{
    estimate_constrained, mark_doerfler, refine_nvb, solve_active_set, solve_unconstrained, SolverConfig,
};

fn assembly(c: &mut Criterion) {
    let cfg = SolverConfig::default();
    let mut g = c.benchmark_group("assemble");
    for name in ["poisson-constrained", "stokes", "heat"] {
        let (p, m) = fixture(name, 4);
        g.bench_with_input(BenchmarkId::from_parameter(name), &(p, m), |b, (p, m)| {
            b.iter(|| assemble_coupled(p, m, &cfg).unwrap())
        });
    }
    g.finish();
}

fn solvers(c: &mut Criterion) {
    let cfg = SolverConfig::default();
    let mut g = c.benchmark_group("solve");
    g.sample_size(10);
    let (p, m) = fixture("poisson-unconstrained", 4);
    g.bench_function("unconstrained/poisson", |b| b.iter(|| solve_unconstrained(&p, &m, &cfg).unwrap()));
    let (p, m) = fixture("stokes", 4);
    g.bench_function("unconstrained/stokes", |b| b.iter(|| solve_unconstrained(&p, &m, &cfg).unwrap()));
    let (p, m) = fixture("poisson-constrained", 4);
    g.bench_function("active-set/poisson", |b| b.iter(|| solve_active_set(&p, &m, &cfg).unwrap()));
    let sol = solve_active_set(&p, &m, &cfg).unwrap();
    g.bench_function("estimator/poisson", |b| b.iter(|| estimate_constrained(&p, &m, &sol)));
    g.finish();
}

fn refinement(c: &mut Criterion) {
    let (_, m) = fixture("lshape", 4);
    let eta = indicators(m.n_elements(), 1);
    c.bench_function("mark/doerfler", |b| b.iter(|| mark_doerfler(black_box(&eta), 0.25).unwrap()));
    let marked = mark_doerfler(&eta, 0.25).unwrap();
    c.bench_function("refine/nvb", |b| b.iter(|| refine_nvb(&m, black_box(&marked)).unwrap()));
}

criterion_group!(benches, assembly, solvers, refinement);
criterion_main!(benches);
