use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mlblue_bench::weight_problem;
use mlblue_core::mosap::{AllocationProblem, VarianceModel};
use mlblue_core::vector::{field_weights_nd, kron_alpha, matrix_weights, scalar_weights_nd};
use mlblue_core::{kkt_solve, optimal_scalar_weights, GroupMomentSet};

fn scalar(c: &mut Criterion) {
    let mut g = c.benchmark_group("scalar_weights");
    for levels in [2, 4, 8] {
        let p = weight_problem(1, levels);
        let moments = GroupMomentSet::per_sample(p.scalar_covs());
        g.bench_with_input(BenchmarkId::new("closed_form", levels), &moments, |b, m| {
            b.iter(|| optimal_scalar_weights(&p.structure, black_box(m), &p.alpha).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("kkt", levels), &moments, |b, m| {
            b.iter(|| kkt_solve(&p.structure, black_box(m), &p.alpha).unwrap())
        });
    }
    g.finish();
}

fn vector(c: &mut Criterion) {
    let mut g = c.benchmark_group("vector_weights");
    g.sample_size(20);
    for n in [16, 64] {
        let p = weight_problem(n, 3);
        g.bench_function(BenchmarkId::new("scalar", n), |b| {
            b.iter(|| scalar_weights_nd(&p.structure, black_box(&p.element_covs), &p.alpha).unwrap())
        });
        g.bench_function(BenchmarkId::new("field", n), |b| {
            b.iter(|| field_weights_nd(&p.structure, black_box(&p.element_covs), &p.alpha).unwrap())
        });
        let target = kron_alpha(&p.alpha, n);
        g.bench_function(BenchmarkId::new("matrix", n), |b| {
            b.iter(|| matrix_weights(&p.structure, &[n; 3], black_box(&p.group_covs), &target).unwrap())
        });
    }
    g.finish();
}

fn allocation(c: &mut Criterion) {
    let mut g = c.benchmark_group("allocate_budget");
    g.sample_size(20);
    for levels in [2, 4, 6] {
        let p = weight_problem(1, levels);
        let problem = AllocationProblem::new(p.structure.clone(), p.alpha.clone(), VarianceModel::Mean(p.scalar_covs()))
            .unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(levels), &problem, |b, pr| {
            b.iter(|| pr.allocate_budget(black_box(100.0)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, scalar, vector, allocation);
criterion_main!(benches);
