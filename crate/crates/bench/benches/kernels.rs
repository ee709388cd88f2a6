use std::hint::black_box;

use blowup_core::evolve::{Propagator, Stepper};
use blowup_core::groundstate::{solve_ground_state, RadialMesh};
use blowup_core::linops::{identity_residuals, solve_rho, RhoMesh};
use blowup_core::modulation::{decompose, recompose, DecomposeOptions, ModulationParams};
use blowup_core::{GridSpec, ModelSpec, SampledModel};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn stepping(c: &mut Criterion) {
    let bundle = solve_ground_state(1, RadialMesh::default()).unwrap();
    let mut group = c.benchmark_group("step");
    for (dim, points) in [(1usize, 4096usize), (2, 128)] {
        let bundle = if dim == 1 {
            bundle.clone()
        } else {
            solve_ground_state(2, RadialMesh::default()).unwrap()
        };
        let grid = GridSpec::new(dim, points, 12.0).unwrap();
        let model = SampledModel::new(&ModelSpec::free(), &grid, None).unwrap();
        let u0 = recompose(&bundle, &ModulationParams::new(1.0, 0.1, 0.0, [0.0, 0.0]), &grid, None).unwrap();
        for stepper in [Stepper::StrangSplitting, Stepper::CrankNicolson] {
            let prop = Propagator::new(&model, 1e-4, stepper);
            group.bench_function(BenchmarkId::new(format!("{stepper:?}"), format!("N{dim}-M{points}")), |b| {
                let mut u = u0.clone();
                b.iter(|| prop.advance(black_box(&mut u), 0.0).unwrap())
            });
        }
    }
    group.finish();
}

fn decomposition(c: &mut Criterion) {
    let bundle = solve_ground_state(1, RadialMesh::default()).unwrap();
    let rho = solve_rho(&bundle, RhoMesh::default()).unwrap();
    let grid = GridSpec::new(1, 2048, 16.0).unwrap();
    let p = ModulationParams::new(0.7, 0.2, 0.3, [0.05, 0.0]);
    let u = recompose(&bundle, &p, &grid, None).unwrap();
    let opts = DecomposeOptions::default();
    c.bench_function("decompose/N1-M2048", |b| {
        b.iter(|| decompose(&bundle, &rho, black_box(&u), Some(p), &opts).unwrap())
    });
}

fn identities(c: &mut Criterion) {
    let bundle = solve_ground_state(1, RadialMesh::default()).unwrap();
    let rho = solve_rho(&bundle, RhoMesh::default()).unwrap();
    let grid = GridSpec::new(1, 512, 16.0).unwrap();
    c.bench_function("identity_residuals/N1-M512", |b| {
        b.iter(|| identity_residuals(&bundle, black_box(&grid), &rho, 2).unwrap())
    });
    c.bench_function("solve_rho/N1", |b| b.iter(|| solve_rho(&bundle, RhoMesh::default()).unwrap()));
}

criterion_group!(benches, stepping, decomposition, identities);
criterion_main!(benches);
