//! Independent reference computations used to validate the solvers.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::control::{cost, CostSpec, GradientGrid};
use crate::error::{Error, Result};
use crate::exec::Backend;
use crate::forward::{simulate_ensemble, ControlGrid, Ensemble, SimOptions, TimeGrid, TrajectoryBundle};
use crate::model::{MeasureSummary, ModelParams, NeuronState, NoiseMode};

/// Refinement of the oracle integrator relative to the simulation grid.
pub const RK4_SUBSTEPS: usize = 16;

/// Right-hand side of the synchronous system: every neuron sees its own `y`
/// as the barycenter.
fn synchronous_rhs(p: &ModelParams, x: &Vector3<f64>, alpha: f64) -> Vector3<f64> {
    let s = NeuronState::from_vector(x);
    p.drift_mean_y(&s, s.y, alpha)
}

fn rk4_step(p: &ModelParams, x: &Vector3<f64>, alpha: f64, h: f64) -> Vector3<f64> {
    let k1 = synchronous_rhs(p, x, alpha);
    let k2 = synchronous_rhs(p, &(x + 0.5 * h * k1), alpha);
    let k3 = synchronous_rhs(p, &(x + 0.5 * h * k2), alpha);
    let k4 = synchronous_rhs(p, &(x + h * k3), alpha);
    x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// `n + 1` RK4 states of the noise-free synchronous system at constant input.
pub fn rk4_path(p: &ModelParams, x0: NeuronState, alpha: f64, h: f64, n: usize) -> Vec<NeuronState> {
    let mut out = Vec::with_capacity(n + 1);
    let mut x = x0.to_vector();
    out.push(x0);
    for _ in 0..n {
        x = rk4_step(p, &x, alpha, h);
        out.push(NeuronState::from_vector(&x));
    }
    out
}

/// Dense deterministic path on a grid refined `substeps` times.
#[derive(Clone, Debug)]
pub struct OdeSolution {
    pub dt_fine: f64,
    pub substeps: usize,
    pub states: Vec<NeuronState>,
}

impl OdeSolution {
    /// State at coarse grid point `k`.
    pub fn at_grid(&self, k: usize) -> NeuronState {
        self.states[k * self.substeps]
    }

    pub fn grid_values(&self) -> Vec<NeuronState> {
        self.states.iter().step_by(self.substeps).copied().collect()
    }
}

/// Classical RK4 for one noise-free neuron driven by a piecewise-constant
/// control. Noise parameters of `p` are ignored.
pub fn integrate_reference(
    p: &ModelParams,
    grid: &TimeGrid,
    ctrl: &ControlGrid,
    x0: NeuronState,
) -> Result<OdeSolution> {
    integrate_reference_refined(p, grid, ctrl, x0, RK4_SUBSTEPS)
}

pub fn integrate_reference_refined(
    p: &ModelParams,
    grid: &TimeGrid,
    ctrl: &ControlGrid,
    x0: NeuronState,
    substeps: usize,
) -> Result<OdeSolution> {
    ctrl.check_grid(grid)?;
    let h = grid.dt / substeps as f64;
    let mut states = Vec::with_capacity(grid.n_steps * substeps + 1);
    states.push(x0);
    let mut x = x0.to_vector();
    for &alpha in &ctrl.values {
        for _ in 0..substeps {
            x = rk4_step(p, &x, alpha, h);
            states.push(NeuronState::from_vector(&x));
        }
    }
    Ok(OdeSolution {
        dt_fine: h,
        substeps,
        states,
    })
}

/// Peak-to-peak range of `v` over `[t_from, t_to]`.
pub fn peak_to_peak_v(sol: &OdeSolution, t_from: f64, t_to: f64) -> f64 {
    let (lo, hi) = sol
        .states
        .iter()
        .enumerate()
        .filter(|(j, _)| {
            let t = *j as f64 * sol.dt_fine;
            t >= t_from - 1e-12 && t <= t_to + 1e-12
        })
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, x)| (lo.min(x.v), hi.max(x.v)));
    hi - lo
}

/// Forward sensitivity of a particle run in the direction `beta`.
#[derive(Clone, Debug)]
pub struct Variation {
    /// Layout `[step][particle]`.
    pub paths: Vec<Vec<Vector3<f64>>>,
    /// `dJ(α)·β`.
    pub derivative: f64,
}

/// Linearizes the discrete forward scheme along `traj`:
///
/// ```text
/// (I - dt·b_x(X_{k+1}, ȳ_k)) δX_{k+1} = δX_k + dt·∂_ȳ b(X_{k+1})·δȳ_k + dt·e₁·β_k
/// ```
///
/// and pairs the result with the cost.
pub fn variation_solve(
    p: &ModelParams,
    traj: &TrajectoryBundle,
    spec: &CostSpec,
    beta: &[f64],
) -> Result<Variation> {
    if p.noise_mode != NoiseMode::ExternalOnly {
        return Err(Error::UnsupportedMode(
            "variation solve requires external-only noise".into(),
        ));
    }
    let grid = &traj.grid;
    spec.check_grid(grid)?;
    if beta.len() != grid.n_steps {
        return Err(Error::GridMismatch(format!(
            "direction has {} values, grid has {} steps",
            beta.len(),
            grid.n_steps
        )));
    }
    let dt = grid.dt;
    let n = traj.n_particles();
    let mut paths = Vec::with_capacity(grid.n_steps + 1);
    paths.push(vec![Vector3::zeros(); n]);
    let mut derivative = 0.0;
    for k in 0..grid.n_steps {
        let prev: &Vec<Vector3<f64>> = &paths[k];
        let mean_dy = prev.iter().map(|z| z[2]).sum::<f64>() / n as f64;
        let mean_dv = prev.iter().map(|z| z[0]).sum::<f64>() / n as f64;
        let residual = traj.summaries[k].mean_v - spec.reference[k];
        derivative += dt * (2.0 * residual * mean_dv + 2.0 * spec.control_penalty * traj.control.values[k] * beta[k]);
        let ybar = traj.summaries[k].mean_y;
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let x = &traj.states[k + 1][i];
            let m = Matrix3::identity() - dt * p.drift_jac_mean_y(x, ybar);
            let rhs = prev[i] + dt * p.drift_deriv_mean_y(x) * mean_dy + Vector3::new(dt * beta[k], 0.0, 0.0);
            let z = m
                .try_inverse()
                .ok_or(Error::SingularStep { particle: i, step: k })?
                * rhs;
            next.push(z);
        }
        paths.push(next);
    }
    Ok(Variation { paths, derivative })
}

/// Central finite differences of the cost with common random numbers:
/// entry `k` is `(J(α + h_k e_k) - J(α - h_k e_k)) / (2 h_k dt)`, an estimate
/// of the gradient density on step `k`. `h_k = h·(1 + |α_k|)`.
pub fn fd_gradient(
    p: &ModelParams,
    spec: &CostSpec,
    ctrl: &ControlGrid,
    ensemble: &Arc<Ensemble>,
    grid: &TimeGrid,
    h: f64,
    backend: Backend,
) -> Result<GradientGrid> {
    ctrl.check_grid(grid)?;
    let inner = SimOptions {
        backend: Backend::Sequential,
        ..SimOptions::default()
    };
    let eval = |values: Vec<f64>| -> Result<f64> {
        let c = ControlGrid::unconstrained(values);
        let traj = simulate_ensemble(p, grid, &c, ensemble, &inner)?;
        cost(&traj, spec, &c)
    };
    let values = backend.try_map(grid.n_steps, |k| {
        let hk = h * (1.0 + ctrl.values[k].abs());
        let mut up = ctrl.values.clone();
        up[k] += hk;
        let mut down = ctrl.values.clone();
        down[k] -= hk;
        Ok::<f64, Error>((eval(up)? - eval(down)?) / (2.0 * hk * grid.dt))
    })?;
    Ok(GradientGrid::new(values, grid.dt))
}

pub const FD_STEP: f64 = 1e-4;

/// Simulates with the given ensemble and returns the cost.
pub fn cost_with_ensemble(
    p: &ModelParams,
    grid: &TimeGrid,
    spec: &CostSpec,
    ctrl: &ControlGrid,
    ensemble: &Arc<Ensemble>,
) -> Result<f64> {
    let traj = simulate_ensemble(p, grid, ctrl, ensemble, &SimOptions::default())?;
    cost(&traj, spec, ctrl)
}

/// Exact empirical `W_p` between two samples on the line, from the monotone
/// coupling of their quantile functions.
pub fn wasserstein1d(a: &[f64], b: &[f64], p_order: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidParameter("empty sample".into()));
    }
    if !(p_order >= 1.0) {
        return Err(Error::InvalidParameter(format!("order must be >= 1, got {p_order}")));
    }
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (na, nb) = (xa.len(), xb.len());
    let (mut i, mut j) = (0, 0);
    // Cumulative mass reached by each quantile function, in units of 1/(na·nb).
    let (mut ca, mut cb) = (nb, na);
    let mut last = 0usize;
    let mut total = 0.0;
    while i < na && j < nb {
        let next = ca.min(cb);
        let mass = (next - last) as f64 / (na * nb) as f64;
        total += mass * (xa[i] - xb[j]).abs().powf(p_order);
        last = next;
        if ca == next {
            i += 1;
            ca += nb;
        }
        if cb == next {
            j += 1;
            cb += na;
        }
    }
    Ok(total.powf(1.0 / p_order))
}

/// One row of the assumption audit: the largest sampled ratio against the
/// analytic constant derived from the coefficients.
#[derive(Clone, Debug)]
pub struct AuditRow {
    pub name: &'static str,
    pub bound: f64,
    pub sampled: f64,
    pub violations: usize,
}

#[derive(Clone, Debug)]
pub struct AssumptionReport {
    pub n_samples: usize,
    pub rows: Vec<AuditRow>,
}

impl AssumptionReport {
    pub fn violations(&self) -> usize {
        self.rows.iter().map(|r| r.violations).sum()
    }

    pub fn row(&self, name: &str) -> Option<&AuditRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

impl fmt::Display for AssumptionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples: {}", self.n_samples)?;
        writeln!(f, "{:<22} {:>14} {:>14} {:>10}", "check", "constant", "sampled sup", "violations")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<22} {:>14.6e} {:>14.6e} {:>10}",
                r.name, r.bound, r.sampled, r.violations
            )?;
        }
        write!(f, "total violations: {}", self.violations())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AuditDomain {
    /// Sampling half-width for `v` and `w`.
    pub radius: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub seed: u64,
}

impl Default for AuditDomain {
    fn default() -> Self {
        Self {
            radius: 5.0,
            alpha_min: -2.0,
            alpha_max: 2.0,
            seed: 2024,
        }
    }
}

struct Tracker {
    name: &'static str,
    bound: f64,
    sampled: f64,
    violations: usize,
}

impl Tracker {
    fn new(name: &'static str, bound: f64) -> Self {
        Self {
            name,
            bound,
            sampled: 0.0,
            violations: 0,
        }
    }

    fn push(&mut self, ratio: f64) {
        if ratio > self.sampled {
            self.sampled = ratio;
        }
        if ratio > self.bound * (1.0 + 1e-9) + 1e-14 {
            self.violations += 1;
        }
    }

    fn finish(self) -> AuditRow {
        AuditRow {
            name: self.name,
            bound: self.bound,
            sampled: self.sampled,
            violations: self.violations,
        }
    }
}

/// `sup |χ'|` on a fine deterministic scan, padded by 1%.
fn cutoff_deriv_sup(p: &ModelParams) -> f64 {
    let n = 200_000;
    (0..=n)
        .map(|j| p.cutoff_chi_deriv(j as f64 / n as f64).abs())
        .fold(0.0, f64::max)
        * 1.01
}

/// Bound on the Lipschitz constant of the gating amplitude on `0 <= y <= 1`.
fn gating_lipschitz(p: &ModelParams) -> f64 {
    let abar = p.abar();
    let bbar = p.bbar();
    let top = (abar * p.t_max).max(bbar);
    // On the support of χ the radicand is at least b̄·δ₀.
    let floor = (bbar * p.cutoff_margin).sqrt();
    let d_v = abar * p.sigmoid_deriv_max() / (2.0 * floor);
    let d_y = cutoff_deriv_sup(p) * top.sqrt() + top / (2.0 * floor);
    (d_v * d_v + d_y * d_y).sqrt()
}

/// Randomized audit of the growth, Lipschitz and monotonicity conditions on
/// the constraint set. The diffusion is audited in full mode so the gating
/// and coupling noise entries are exercised.
pub fn check_assumptions(p: &ModelParams, n_samples: usize, dom: &AuditDomain) -> Result<AssumptionReport> {
    p.validate()?;
    let full = ModelParams {
        noise_mode: NoiseMode::Full,
        ..p.clone()
    };
    let sj = p.sigma_j;
    let vr = p.v_rev;
    let c = p.c;
    let sp = p.sigmoid_deriv_max();
    let lip_g = gating_lipschitz(p);
    let rev = vr.abs().max(1.0);

    let mut sigma1 = Tracker::new(
        "sigma1 growth",
        (p.sigma_ext.powi(2) + 2.0 * sj * sj * vr * vr + p.abar() * p.t_max + p.bbar()).max(2.0 * sj * sj),
    );
    let mut sigma2 = Tracker::new("sigma2 lipschitz", sj * sj + lip_g * lip_g);
    let mut wass_b = Tracker::new("wass_b coupling", 2.0 * p.j * p.j * rev * rev);
    let mut mono1 = Tracker::new(
        "mono1 growth",
        [
            1.0 + (c - 1.0).abs() / 2.0 + 0.5 + p.j * vr.abs() / 2.0,
            (c - 1.0).abs() / 2.0 + c * p.a / 2.0,
            0.5,
            p.j * vr.abs() / 2.0 + c * p.a / 2.0 + p.a_r * p.t_max / 4.0,
        ]
        .into_iter()
        .fold(0.0, f64::max),
    );
    let mut mono2 = Tracker::new(
        "mono2 one-sided",
        (1.0 + (c - 1.0).abs() / 2.0 + 0.5 + p.a_r * sp / 2.0).max((c - 1.0).abs() / 2.0),
    );
    let mut a1_form = Tracker::new("A1 b_x form", 1.0 + (c - 1.0).abs() / 2.0 + p.a_r * sp / 2.0);
    let mut a1_norm = Tracker::new(
        "A1 b_x growth",
        (2.0 + p.j + c + c * p.b + p.a_r * sp + p.a_r * p.t_max + p.a_d).max(1.0),
    );
    let mut a1_alpha = Tracker::new("A1 b_alpha", 1.0);
    let mut a1_mu = Tracker::new("A1 b_mu", p.j * rev);
    let mut a2_x = Tracker::new("A2 sigma_x", (sj * sj + lip_g * lip_g).sqrt());
    let mut a2_alpha = Tracker::new("A2 sigma_alpha", 0.0);
    let mut a2_mu = Tracker::new("A2 sigma_mu", sj * rev);
    let mut outside = Tracker::new("constrained dynamics", 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(dom.seed);
    let r = dom.radius;
    let (amin, amax) = (dom.alpha_min, dom.alpha_max);
    let draw = |rng: &mut ChaCha8Rng| {
        NeuronState::new(rng.random_range(-r..=r), rng.random_range(-r..=r), rng.random_range(0.0..=1.0))
    };
    for _ in 0..n_samples {
        let x = draw(&mut rng);
        let x2 = draw(&mut rng);
        let alpha = rng.random_range(amin..=amax);
        let alpha2 = rng.random_range(amin..=amax);
        let ybar = rng.random_range(0.0..=1.0);
        let ybar2 = rng.random_range(0.0..=1.0);
        let m = MeasureSummary::with_mean_y(ybar);
        let xn2 = x.norm_squared();

        let s = full.diffusion(&x, &m, alpha)?;
        let s2 = full.diffusion(&x2, &m, alpha2)?;
        sigma1.push(s.norm_squared() / (1.0 + alpha * alpha + xn2));
        let dx = x.to_vector() - x2.to_vector();
        let da = alpha - alpha2;
        let dist2 = dx.norm_squared() + da * da;
        if dist2 > 1e-24 {
            sigma2.push((s - s2).norm_squared() / dist2);
        }

        let b = p.drift_mean_y(&x, ybar, alpha);
        let b_other_mu = p.drift_mean_y(&x, ybar2, alpha);
        let dy = ybar - ybar2;
        if dy.abs() > 1e-12 {
            // |ȳ - ȳ'| <= W₁ <= W₂, so this ratio dominates the Wasserstein one.
            wass_b.push((b - b_other_mu).norm_squared() / ((1.0 + xn2) * dy * dy));
        }

        mono1.push(x.to_vector().dot(&b) / (1.0 + alpha * alpha + xn2));
        let b2 = p.drift_mean_y(&x2, ybar, alpha2);
        if dist2 > 1e-24 {
            mono2.push(dx.dot(&(b - b2)) / dist2);
        }

        let jac = p.drift_jac_mean_y(&x, ybar);
        let sym = 0.5 * (jac + jac.transpose());
        a1_form.push(sym.symmetric_eigenvalues().max());
        a1_norm.push(jac.norm() / (1.0 + xn2));
        // The drift is affine in α, so a wide difference is exact up to rounding.
        let h = 1e-2;
        let b_alpha = (p.drift_mean_y(&x, ybar, alpha + h) - p.drift_mean_y(&x, ybar, alpha - h)) / (2.0 * h);
        a1_alpha.push(b_alpha.norm());
        let xn = xn2.sqrt();
        a1_mu.push(p.drift_lions_deriv(&x, &x2).norm() / (1.0 + xn));

        let (d12, d33v, d33y) = full.diffusion_state_partials(&x, &m)?;
        a2_x.push((d12 * d12 + d33v * d33v + d33y * d33y).sqrt());
        let s_alpha = full.diffusion(&x, &m, alpha + h)? - s;
        a2_alpha.push(s_alpha.norm() / h);
        a2_mu.push((sj * (x.v - vr)).abs() / (1.0 + xn));

        // Outside the constraint set: π_x·b <= 0, σ₃₃ = 0, π_xx : σσᵀ = 0.
        let y_out = if rng.random_bool(0.5) {
            rng.random_range(-3.0..-1e-9)
        } else {
            rng.random_range(1.0 + 1e-9..4.0)
        };
        let xo = NeuronState::new(x.v, x.w, y_out);
        let bo = p.drift_mean_y(&xo, ybar, alpha);
        let so = full.diffusion(&xo, &m, alpha)?;
        let hess = NeuronState::constraint_hess().component_mul(&(so * so.transpose())).sum();
        let grad_noise = (xo.constraint_grad().transpose() * so).amax();
        let breach = xo.constraint_grad().dot(&bo).max(0.0) + so[(2, 2)].abs() + hess.abs() + grad_noise;
        outside.push(breach);
    }

    Ok(AssumptionReport {
        n_samples,
        rows: vec![
            sigma1.finish(),
            sigma2.finish(),
            wass_b.finish(),
            mono1.finish(),
            mono2.finish(),
            a1_form.finish(),
            a1_norm.finish(),
            a1_alpha.finish(),
            a1_mu.finish(),
            a2_x.finish(),
            a2_alpha.finish(),
            a2_mu.finish(),
            outside.finish(),
        ],
    })
}
