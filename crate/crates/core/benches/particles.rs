use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use fhn_control::adjoint::solve_pathwise;
use fhn_control::forward::{simulate_ensemble, SimOptions, ORBIT_ANCHOR};
use fhn_control::{AdjointOptions, Backend, ControlGrid, CostSpec, Ensemble, InitialLaw, ModelParams, TimeGrid};

fn backends(c: &mut Criterion) {
    let p = ModelParams::default();
    let grid = TimeGrid::new(20.0, 0.1).unwrap();
    let init = InitialLaw::orbit_uniform(&p, ORBIT_ANCHOR).unwrap();
    let ctrl = ControlGrid::constant(&grid, 0.2, -2.0, 2.0).unwrap();
    let spec = CostSpec::tracking(vec![-1.2; grid.n_steps + 1]);

    let mut forward = c.benchmark_group("forward");
    forward.sample_size(10);
    for n in [200, 1000] {
        let ensemble = Arc::new(Ensemble::draw(&p, &grid, &init, n, 1, Backend::default()).unwrap());
        for backend in [Backend::Sequential, Backend::Parallel] {
            let opts = SimOptions {
                backend,
                ..SimOptions::default()
            };
            forward.bench_with_input(BenchmarkId::new(format!("{backend:?}"), n), &n, |b, _| {
                b.iter(|| simulate_ensemble(&p, &grid, &ctrl, black_box(&ensemble), &opts).unwrap())
            });
        }
    }
    forward.finish();

    let mut backward = c.benchmark_group("adjoint");
    backward.sample_size(10);
    for n in [200, 1000] {
        let ensemble = Arc::new(Ensemble::draw(&p, &grid, &init, n, 1, Backend::default()).unwrap());
        let traj = simulate_ensemble(&p, &grid, &ctrl, &ensemble, &SimOptions::default()).unwrap();
        for backend in [Backend::Sequential, Backend::Parallel] {
            let opts = AdjointOptions {
                backend,
                ..AdjointOptions::default()
            };
            backward.bench_with_input(BenchmarkId::new(format!("{backend:?}"), n), &n, |b, _| {
                b.iter(|| solve_pathwise(&p, black_box(&traj), &spec, &opts).unwrap())
            });
        }
    }
    backward.finish();
}

criterion_group!(benches, backends);
criterion_main!(benches);
