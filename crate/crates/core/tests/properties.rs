use std::sync::Arc;

use proptest::prelude::*;

use fhn_control::adjoint::solve_pathwise;
use fhn_control::control::{cost, gradient, project};
use fhn_control::forward::{
    constraint_report, local_field_potential, simulate, simulate_ensemble, write_summary_csv, SimOptions,
    ORBIT_ANCHOR,
};
use fhn_control::io::read_csv_column;
use fhn_control::model::NoiseMode;
use fhn_control::oracle::variation_solve;
use fhn_control::{
    AdjointOptions, Backend, ControlGrid, CostSpec, Ensemble, InitialLaw, ModelParams, NeuronState, TimeGrid,
};

fn point_law() -> InitialLaw {
    InitialLaw::Point(ORBIT_ANCHOR)
}

fn controls(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.5..1.5f64, n)
}

fn l2(a: &[f64], b: &[f64], dt: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| dt * (x - y).powi(2)).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn projection_is_nonexpansive(a in prop::collection::vec(-5.0..5.0f64, 20), b in prop::collection::vec(-5.0..5.0f64, 20)) {
        let pa = project(&ControlGrid { values: a.clone(), alpha_min: -1.0, alpha_max: 2.0 });
        let pb = project(&ControlGrid { values: b.clone(), alpha_min: -1.0, alpha_max: 2.0 });
        prop_assert!(l2(&pa.values, &pb.values, 0.1) <= l2(&a, &b, 0.1) + 1e-15);
        prop_assert!(pa.values.iter().all(|x| (-1.0..=2.0).contains(x)));
        prop_assert_eq!(project(&pa), pa);
    }

    #[test]
    fn full_noise_keeps_gating_in_unit_interval(values in controls(100), seed in 0u64..1000, sigma_j in 0.0..0.5f64) {
        let p = ModelParams { noise_mode: NoiseMode::Full, sigma_j, ..ModelParams::default() };
        let grid = TimeGrid::new(10.0, 0.1).unwrap();
        let init = InitialLaw::Samples(vec![NeuronState::new(-1.0, 0.0, 0.02), NeuronState::new(1.5, 0.5, 0.98)]);
        let traj = simulate(&p, &grid, &ControlGrid::unconstrained(values), &init, 16, seed).unwrap();
        let r = constraint_report(&traj, 0.0);
        prop_assert_eq!(r.violations, 0);
    }

    #[test]
    fn control_to_state_is_stable(a in controls(50), b in controls(50), seed in 0u64..100) {
        // Short horizon: the LFP moves at most proportionally to the control change.
        let p = ModelParams::default();
        let grid = TimeGrid::new(5.0, 0.1).unwrap();
        let ensemble = Arc::new(Ensemble::draw(&p, &grid, &point_law(), 8, seed, Backend::default()).unwrap());
        let opts = SimOptions::default();
        let la = local_field_potential(&simulate_ensemble(&p, &grid, &ControlGrid::unconstrained(a.clone()), &ensemble, &opts).unwrap());
        let lb = local_field_potential(&simulate_ensemble(&p, &grid, &ControlGrid::unconstrained(b.clone()), &ensemble, &opts).unwrap());
        let dv = la.iter().zip(&lb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let da = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(dv <= 5.0 * (5.0f64).exp() * da + 1e-12, "dv {} da {}", dv, da);
    }

    #[test]
    fn adjoint_is_linear_in_the_drive(u in prop::collection::vec(-1.0..1.0f64, 31), w in prop::collection::vec(-1.0..1.0f64, 31)) {
        let p = ModelParams::default();
        let grid = TimeGrid::new(3.0, 0.1).unwrap();
        let traj = simulate(&p, &grid, &ControlGrid::unconstrained(vec![0.3; 30]), &point_law(), 6, 3).unwrap();
        let lfp = local_field_potential(&traj);
        let solve = |shift: &dyn Fn(usize) -> f64| {
            let spec = CostSpec::tracking((0..=grid.n_steps).map(|k| lfp[k] - shift(k)).collect());
            solve_pathwise(&p, &traj, &spec, &AdjointOptions::default()).unwrap().mean_p()
        };
        let pu = solve(&|k| u[k]);
        let pw = solve(&|k| w[k]);
        let both = solve(&|k| u[k] + w[k]);
        for k in 0..=grid.n_steps {
            let scale = 1.0 + both[k].norm();
            prop_assert!((both[k] - pu[k] - pw[k]).norm() <= 1e-12 * scale);
        }
    }

    #[test]
    fn duality_on_random_instances(values in controls(40), beta in prop::collection::vec(-1.0..1.0f64, 40), seed in 0u64..50, penalty in 0.0..0.1f64) {
        let p = ModelParams::default();
        let grid = TimeGrid::new(4.0, 0.1).unwrap();
        let init = InitialLaw::orbit_uniform(&p, ORBIT_ANCHOR).unwrap();
        let ctrl = ControlGrid::unconstrained(values);
        let traj = simulate(&p, &grid, &ctrl, &init, 12, seed).unwrap();
        let spec = CostSpec::tracking(vec![-1.0; grid.n_steps + 1]).with_penalty(penalty);
        let adj = solve_pathwise(&p, &traj, &spec, &AdjointOptions::default()).unwrap();
        let g = gradient(&traj, &adj, &spec).unwrap();
        let var = variation_solve(&p, &traj, &spec, &beta).unwrap();
        let pairing = g.dot(&beta);
        prop_assert!((pairing - var.derivative).abs() <= 1e-9 * (1.0 + var.derivative.abs()));
    }
}

#[test]
fn backends_are_bitwise_identical() {
    let p = ModelParams {
        noise_mode: NoiseMode::Full,
        sigma_j: 0.1,
        ..ModelParams::default()
    };
    let grid = TimeGrid::new(10.0, 0.1).unwrap();
    let init = InitialLaw::orbit_uniform(&p, ORBIT_ANCHOR).unwrap();
    let ctrl = ControlGrid::constant(&grid, 0.2, -2.0, 2.0).unwrap();
    let run = |backend: Backend| {
        let ensemble = Arc::new(Ensemble::draw(&p, &grid, &init, 64, 9, backend).unwrap());
        let opts = SimOptions {
            backend,
            ..SimOptions::default()
        };
        simulate_ensemble(&p, &grid, &ctrl, &ensemble, &opts).unwrap()
    };
    let a = run(Backend::Sequential);
    let b = run(Backend::Parallel);
    assert_eq!(a.states, b.states);
    assert_eq!(a.noise().step_slice(50), b.noise().step_slice(50));

    let q = ModelParams::default();
    let spec = CostSpec::tracking(vec![-1.0; grid.n_steps + 1]);
    let ensemble = Arc::new(Ensemble::draw(&q, &grid, &init, 64, 9, Backend::default()).unwrap());
    let traj = simulate_ensemble(&q, &grid, &ctrl, &ensemble, &SimOptions::default()).unwrap();
    let adj = |backend| {
        let opts = AdjointOptions {
            backend,
            ..AdjointOptions::default()
        };
        solve_pathwise(&q, &traj, &spec, &opts).unwrap().p
    };
    assert_eq!(adj(Backend::Sequential), adj(Backend::Parallel));
}

#[test]
fn same_seed_same_run() {
    let p = ModelParams::default();
    let grid = TimeGrid::new(5.0, 0.1).unwrap();
    let init = InitialLaw::orbit_uniform(&p, ORBIT_ANCHOR).unwrap();
    let ctrl = ControlGrid::constant(&grid, 0.1, -2.0, 2.0).unwrap();
    let a = simulate(&p, &grid, &ctrl, &init, 20, 5).unwrap();
    let b = simulate(&p, &grid, &ctrl, &init, 20, 5).unwrap();
    let c = simulate(&p, &grid, &ctrl, &init, 20, 6).unwrap();
    assert_eq!(a.states, b.states);
    assert_ne!(a.states, c.states);
}

#[test]
fn cost_recomputes_from_exported_csv() {
    let p = ModelParams::default();
    let grid = TimeGrid::new(10.0, 0.1).unwrap();
    let init = InitialLaw::orbit_uniform(&p, ORBIT_ANCHOR).unwrap();
    let ctrl = ControlGrid::new((0..grid.n_steps).map(|k| (k as f64 * 0.1).sin()).collect(), -2.0, 2.0).unwrap();
    let traj = simulate(&p, &grid, &ctrl, &init, 30, 2).unwrap();
    let reference: Vec<f64> = (0..=grid.n_steps).map(|k| -1.0 + 0.01 * k as f64).collect();
    let spec = CostSpec::tracking(reference.clone()).with_penalty(0.5);
    let expected = cost(&traj, &spec, &ctrl).unwrap();

    let mut buf = Vec::new();
    write_summary_csv(&traj, &mut buf).unwrap();
    let mean_v = read_csv_column(buf.as_slice(), "mean_v").unwrap();
    let recomputed: f64 = (0..grid.n_steps)
        .map(|k| grid.dt * ((mean_v[k] - reference[k]).powi(2) + 0.5 * ctrl.values[k].powi(2)))
        .sum();
    assert_eq!(recomputed, expected);
}
