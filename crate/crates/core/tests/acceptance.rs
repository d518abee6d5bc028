//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion ids (`c1` .. `c11`) to run a subset.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fhn_control::adjoint::{mean_p1_relative_error, rbf, solve_pathwise, solve_regression};
use fhn_control::control::gradient;
use fhn_control::experiment::{resting_reference, run_experiment, ExperimentConfig};
use fhn_control::forward::{
    constraint_report, simulate, simulate_ensemble, SimOptions, ORBIT_ANCHOR,
};
use fhn_control::oracle::{
    check_assumptions, fd_gradient, integrate_reference_refined, peak_to_peak_v, variation_solve, wasserstein1d,
    AuditDomain, FD_STEP,
};
use fhn_control::{
    AdjointOptions, Backend, ControlGrid, CostSpec, Ensemble, InitialLaw, MeanFieldConvention, ModelParams,
    NeuronState, RegressionParams, TimeGrid,
};

type Outcome = Result<(bool, String), String>;

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn sci(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn random_box_control(rng: &mut ChaCha8Rng, grid: &TimeGrid, lo: f64, hi: f64) -> ControlGrid {
    let values = (0..grid.n_steps).map(|_| rng.random_range(lo..hi)).collect();
    ControlGrid::new(values, lo, hi).unwrap()
}

fn orbit_law(p: &ModelParams) -> InitialLaw {
    InitialLaw::orbit_uniform(p, ORBIT_ANCHOR).unwrap()
}

fn c1() -> Outcome {
    let p = ModelParams::default();
    let grid = TimeGrid::new(200.0, 0.1).map_err(|e| e.to_string())?;
    let init = orbit_law(&p);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut checked, mut violations, mut excess) = (0, 0, 0.0f64);
    for seed in 0..10 {
        let ctrl = random_box_control(&mut rng, &grid, -2.0, 2.0);
        let traj = simulate(&p, &grid, &ctrl, &init, 500, seed).map_err(|e| e.to_string())?;
        let r = constraint_report(&traj, 1e-9);
        checked += r.checked;
        violations += r.violations;
        excess = excess.max(r.max_excess);
    }
    Ok((violations == 0, format!("{violations} violations in {checked} states, max excess {excess:.2e}")))
}

fn c2() -> Outcome {
    let report = check_assumptions(&ModelParams::default(), 100_000, &AuditDomain::default()).map_err(|e| e.to_string())?;
    let v = report.violations();
    Ok((v == 0, format!("{v} violations over {} samples in {} checks", report.n_samples, report.rows.len())))
}

fn c3() -> Outcome {
    let p = ModelParams::default();
    let grid = TimeGrid::new(20.0, 0.1).unwrap();
    let init = orbit_law(&p);
    let spec = CostSpec::tracking(resting_reference(&p, &grid).values);
    let ensemble = Arc::new(Ensemble::draw(&p, &grid, &init, 256, 3, Backend::default()).map_err(|e| e.to_string())?);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let ctrl = random_box_control(&mut rng, &grid, -1.0, 1.0);
        let traj = simulate_ensemble(&p, &grid, &ctrl, &ensemble, &SimOptions::default()).map_err(|e| e.to_string())?;
        let adj = solve_pathwise(&p, &traj, &spec, &AdjointOptions::default()).map_err(|e| e.to_string())?;
        let g = gradient(&traj, &adj, &spec).map_err(|e| e.to_string())?;
        let fd = fd_gradient(&p, &spec, &ctrl, &ensemble, &grid, FD_STEP, Backend::default()).map_err(|e| e.to_string())?;
        worst = worst.max(g.relative_error(&fd));
    }
    Ok((worst <= 1e-3, format!("worst relative l2 error {worst:.3e} over 5 controls (tol 1e-3)")))
}

fn c4() -> Outcome {
    let p = ModelParams::default();
    let grid = TimeGrid::new(20.0, 0.1).unwrap();
    let init = orbit_law(&p);
    let spec = CostSpec::tracking(resting_reference(&p, &grid).values).with_penalty(0.01);
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let ctrl = random_box_control(&mut rng, &grid, -1.0, 1.0);
    let traj = simulate(&p, &grid, &ctrl, &init, 256, 4).map_err(|e| e.to_string())?;
    let adj = solve_pathwise(&p, &traj, &spec, &AdjointOptions::default()).map_err(|e| e.to_string())?;
    let g = gradient(&traj, &adj, &spec).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let beta: Vec<f64> = (0..grid.n_steps).map(|_| rng.random_range(-1.0..1.0)).collect();
        let var = variation_solve(&p, &traj, &spec, &beta).map_err(|e| e.to_string())?;
        let pairing = g.dot(&beta);
        worst = worst.max((pairing - var.derivative).abs() / var.derivative.abs());
    }
    Ok((worst <= 1e-5, format!("worst relative error {worst:.3e} over 5 directions (tol 1e-5)")))
}

fn c5() -> Outcome {
    let p = ModelParams::default();
    let grid = TimeGrid::new(20.0, 0.1).unwrap();
    let init = orbit_law(&p);
    let spec = CostSpec::tracking(resting_reference(&p, &grid).values);
    let ctrl = ControlGrid::constant(&grid, 0.2, -2.0, 2.0).unwrap();
    let traj = simulate(&p, &grid, &ctrl, &init, 512, 5).map_err(|e| e.to_string())?;
    let path = solve_pathwise(&p, &traj, &spec, &AdjointOptions::default()).map_err(|e| e.to_string())?;
    let params = RegressionParams {
        n_nodes: 64,
        ..RegressionParams::default()
    };
    let reg = solve_regression(&p, &traj, &spec, &params, MeanFieldConvention::Swapped).map_err(|e| e.to_string())?;
    let err = mean_p1_relative_error(&reg, &path);
    Ok((err <= 0.05, format!("relative l2 error of mean P1 {err:.4} (tol 0.05)")))
}

fn c6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let nodes: Vec<Vector3<f64>> = (0..40)
        .map(|_| Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0)))
        .collect();
    let delta = rbf::median_bandwidth(&nodes);
    let a = rbf::design_matrix(&nodes, &nodes, delta);
    let w = DMatrix::from_fn(40, 2, |_, _| rng.random_range(-1.0..1.0));
    let targets = &a * &w;
    let fit = rbf::fit(&nodes, &targets, nodes.clone(), delta, 0.0).map_err(|e| e.to_string())?;
    let residual = (fit.predict_many(&nodes) - &targets).amax();
    let noisy = DMatrix::from_fn(40, 1, |_, _| rng.random_range(-1.0..1.0));
    let norms: Vec<f64> = [1e-6, 1e-3, 1e-1, 10.0]
        .iter()
        .map(|&lam| rbf::fit(&nodes, &noisy, nodes.clone(), delta, lam).map(|m| m.weights.norm()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let shrinks = norms.windows(2).all(|w| w[1] < w[0]);
    Ok((
        residual <= 1e-8 && shrinks,
        format!("interpolation residual {residual:.2e} (tol 1e-8), weight norms {} decreasing: {shrinks}", sci(&norms)),
    ))
}

fn c7() -> Outcome {
    let p = ModelParams::default().uncoupled().deterministic();
    let grid = TimeGrid::new(200.0, 0.1).unwrap();
    let x0 = p.uncoupled_rest_point(0.0);
    let amp = |alpha: f64| -> Result<f64, String> {
        let ctrl = ControlGrid::unconstrained(vec![alpha; grid.n_steps]);
        let sol = integrate_reference_refined(&p, &grid, &ctrl, x0, 16).map_err(|e| e.to_string())?;
        Ok(peak_to_peak_v(&sol, 100.0, 200.0))
    };
    let (hi, lo) = (amp(0.33)?, amp(0.315)?);
    Ok((hi >= 3.0 * lo, format!("peak-to-peak v: {hi:.4} at 0.33, {lo:.4} at 0.315, ratio {:.1}", hi / lo)))
}

fn c8() -> Outcome {
    let cfg = ExperimentConfig::desk_preset();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let report = run_experiment(&cfg, dir.path()).map_err(|e| e.to_string())?;
    let costs = report.state.accepted_costs();
    let decreasing = costs.windows(2).all(|w| w[1] < w[0]);
    let accepted = report.state.accepted_iterations();
    let ratio = report.state.cost / report.baseline_cost;
    Ok((
        decreasing && ratio <= 0.5 && accepted <= 50,
        format!(
            "baseline {:.4}, final {:.4} (ratio {ratio:.3}, tol 0.5) after {accepted} accepted iterations, strictly decreasing: {decreasing}",
            report.baseline_cost, report.state.cost
        ),
    ))
}

fn c9() -> Outcome {
    let (mut early, mut late) = (Vec::new(), Vec::new());
    for seed in 1..=3 {
        let mut cfg = ExperimentConfig::desk_preset().uncoupled();
        cfg.run.seed = seed;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let report = run_experiment(&cfg, dir.path()).map_err(|e| e.to_string())?;
        let grid = cfg.time_grid().unwrap();
        let (mut e, mut l) = (Vec::new(), Vec::new());
        for (k, a) in report.state.control.values.iter().enumerate() {
            if grid.time(k) <= 100.0 + 1e-9 {
                e.push(a.abs());
            } else {
                l.push(a.abs());
            }
        }
        early.push(e.iter().sum::<f64>() / e.len() as f64);
        late.push(l.iter().sum::<f64>() / l.len() as f64);
    }
    let (e, l) = (median(early), median(late));
    Ok((l < e, format!("seed-median mean |alpha|: {e:.4} on [0, 100], {l:.4} on (100, 200]")))
}

fn c10() -> Outcome {
    let p = ModelParams::default().uncoupled().deterministic();
    let alpha = 0.5;
    let t_end = 20.0;
    let mut errors = Vec::new();
    let dts = [0.1, 0.05, 0.025];
    for &dt in &dts {
        let grid = TimeGrid::new(t_end, dt).unwrap();
        let ctrl = ControlGrid::unconstrained(vec![alpha; grid.n_steps]);
        let traj = simulate(&p, &grid, &ctrl, &InitialLaw::Point(ORBIT_ANCHOR), 1, 0).map_err(|e| e.to_string())?;
        let sol = integrate_reference_refined(&p, &grid, &ctrl, ORBIT_ANCHOR, 64).map_err(|e| e.to_string())?;
        let err = (0..=grid.n_steps)
            .map(|k| {
                let d: NeuronState = traj.states[k][0];
                (d.to_vector() - sol.at_grid(k).to_vector()).amax()
            })
            .fold(0.0, f64::max);
        errors.push(err);
    }
    // Least-squares slope of log(err) on log(dt).
    let xs: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 3.0, ys.iter().sum::<f64>() / 3.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    Ok(((slope - 1.0).abs() <= 0.2, format!("errors {}, observed order {slope:.3} (1.0 +- 0.2)", sci(&errors))))
}

fn c11() -> Outcome {
    let p = ModelParams::default();
    let grid = TimeGrid::new(20.0, 0.1).unwrap();
    let init = orbit_law(&p);
    let ctrl = ControlGrid::constant(&grid, 0.0, -2.0, 2.0).unwrap();
    let final_v = |n: usize, seed: u64| -> Result<Vec<f64>, String> {
        let traj = simulate(&p, &grid, &ctrl, &init, n, seed).map_err(|e| e.to_string())?;
        Ok(traj.states[grid.n_steps].iter().map(|x| x.v).collect())
    };
    let reference = final_v(1024, 10_000)?;
    let mut dists = [Vec::new(), Vec::new()];
    for seed in 0..10 {
        for (slot, n) in [64, 256].into_iter().enumerate() {
            dists[slot].push(wasserstein1d(&final_v(n, 100 + seed)?, &reference, 2.0).map_err(|e| e.to_string())?);
        }
    }
    let [small, large] = dists;
    let (m64, m256) = (median(small), median(large));
    Ok((m256 < m64, format!("median W2: {m64:.4} at N=64, {m256:.4} at N=256")))
}

fn main() {
    let criteria: [(&str, &str, fn() -> Outcome); 11] = [
        ("c1", "constraint preservation", c1),
        ("c2", "assumption audit", c2),
        ("c3", "gradient vs finite differences", c3),
        ("c4", "discrete duality", c4),
        ("c5", "regression vs pathwise adjoint", c5),
        ("c6", "rbf fitter", c6),
        ("c7", "hopf sensitivity", c7),
        ("c8", "optimization behavior", c8),
        ("c9", "uncoupled contrast", c9),
        ("c10", "forward scheme order", c10),
        ("c11", "propagation of chaos", c11),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = match check() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let secs = start.elapsed().as_secs_f64();
        println!("{} {id:>3} {name}: {detail} [{secs:.1} s]", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
