use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use dcgrid_core::plant::full_rhs_into;
use dcgrid_core::{
    integrate, presets, solve_equilibrium, solve_h, IntegrateOptions, LyapunovReference, Scenario,
};

fn kernels(c: &mut Criterion) {
    let grid = presets::cs2().microgrid().expect("preset is valid");
    let eq = solve_equilibrium(&grid).expect("equilibrium");
    let x = eq.state.to_vec();
    let lambda = eq.controller().lambda.clone();

    let mut out = vec![0.0; x.len()];
    c.bench_function("full_rhs", |b| {
        b.iter(|| full_rhs_into(black_box(&x), &grid, true, &mut out))
    });

    c.bench_function("solve_h_cold", |b| {
        b.iter(|| solve_h(black_box(&lambda), &grid, None).unwrap())
    });

    c.bench_function("solve_equilibrium", |b| {
        b.iter(|| solve_equilibrium(black_box(&grid)).unwrap())
    });

    // 1000 RK4 steps from the equilibrium, no events.
    let opts = IntegrateOptions {
        dt: 1e-4,
        t_end: 0.1,
        sample_every: 1000,
        reference: LyapunovReference::Origin,
    };
    let steady = Scenario::steady();
    c.bench_function("rk4_1000_steps", |b| {
        b.iter(|| integrate(black_box(&eq.state), &grid, &steady, &opts).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = kernels
}
criterion_main!(benches);
