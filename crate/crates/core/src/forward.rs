//! Particle approximation of the controlled mean-field dynamics.
//!
//! One step of the scheme solves, independently for every particle,
//!
//! ```text
//! X_{k+1} = X_k + dt · b(X_{k+1}, ȳ_k, α_k) + σ(X_k, μ_k) ΔW_k
//! ```
//!
//! where `ȳ_k` is the empirical gating barycenter at step `k`. The stiff
//! own-state drift is implicit (damped Newton on the 3×3 system), the
//! mean-field coupling and the diffusion are explicit.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::exec::Backend;
use crate::model::{MeasureSummary, ModelParams, NeuronState, NoiseMode};
use crate::noise::{init_stream, NoiseField};
use crate::oracle;

/// Uniform time grid `t_k = k·dt`, `k = 0..=n_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub t_end: f64,
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) || !(t_end > 0.0 && t_end.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "time grid needs t_end > 0 and dt > 0 (got {t_end}, {dt})"
            )));
        }
        let n = (t_end / dt).round();
        if (n * dt - t_end).abs() > 1e-9 * t_end.max(1.0) {
            return Err(Error::InvalidParameter(format!(
                "t_end = {t_end} is not a multiple of dt = {dt}"
            )));
        }
        Ok(Self {
            t_end,
            dt,
            n_steps: n as usize,
        })
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(|k| self.time(k))
    }
}

/// Piecewise-constant scalar control: `values[k]` acts on `[t_k, t_{k+1})`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlGrid {
    pub values: Vec<f64>,
    pub alpha_min: f64,
    pub alpha_max: f64,
}

impl ControlGrid {
    pub fn new(values: Vec<f64>, alpha_min: f64, alpha_max: f64) -> Result<Self> {
        if !(alpha_min <= alpha_max) {
            return Err(Error::InvalidParameter(format!(
                "empty control box [{alpha_min}, {alpha_max}]"
            )));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= alpha_min && **v <= alpha_max)) {
            return Err(Error::InvalidParameter(format!(
                "control value {v} outside [{alpha_min}, {alpha_max}]"
            )));
        }
        Ok(Self {
            values,
            alpha_min,
            alpha_max,
        })
    }

    pub fn constant(grid: &TimeGrid, value: f64, alpha_min: f64, alpha_max: f64) -> Result<Self> {
        Self::new(vec![value; grid.n_steps], alpha_min, alpha_max)
    }

    /// Same values with the box widened to contain them; used for
    /// finite-difference perturbations that may step outside the box.
    pub fn unconstrained(values: Vec<f64>) -> Self {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Self {
            values,
            alpha_min: lo.min(0.0),
            alpha_max: hi.max(0.0),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `∫|α|^r dt`, monitored against the admissible-set integral bound.
    pub fn power_integral(&self, r: f64, dt: f64) -> f64 {
        self.values.iter().map(|a| a.abs().powf(r) * dt).sum()
    }

    pub fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if self.values.len() != grid.n_steps {
            return Err(Error::GridMismatch(format!(
                "control has {} values, grid has {} steps",
                self.values.len(),
                grid.n_steps
            )));
        }
        Ok(())
    }
}

/// Deterministic orbit used as the support of the initial law.
#[derive(Clone, Debug, PartialEq)]
pub struct Orbit {
    pub anchor: NeuronState,
    /// Detected return time through the anchor's `v` level, if any.
    pub period: Option<f64>,
    /// Length of the sampled time window.
    pub window: f64,
    pub samples: Vec<NeuronState>,
}

pub const ORBIT_SAMPLES: usize = 4096;
/// Horizon searched for the first return of the orbit.
const ORBIT_SEARCH_HORIZON: f64 = 1000.0;
/// Window used when the orbit never returns (e.g. decays to rest).
const ORBIT_FALLBACK_WINDOW: f64 = 100.0;

impl Orbit {
    /// Integrates the noise-free, uncontrolled synchronous system from `anchor`
    /// and stores `n_samples` states equally spaced in time over one period.
    pub fn generate(p: &ModelParams, anchor: NeuronState, n_samples: usize) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::InvalidParameter("orbit needs at least one sample".into()));
        }
        let p = p.deterministic();
        let fine = 0.1 / 16.0;
        let n_search = (ORBIT_SEARCH_HORIZON / fine).round() as usize;
        let path = oracle::rk4_path(&p, anchor, 0.0, fine, n_search);
        let level = anchor.v;
        let mut crossings = Vec::new();
        for k in 1..path.len() {
            let (v0, v1) = (path[k - 1].v, path[k].v);
            if v0 < level && v1 >= level {
                let frac = (level - v0) / (v1 - v0);
                crossings.push((k as f64 - 1.0 + frac) * fine);
                if crossings.len() == 2 {
                    break;
                }
            }
        }
        let period = (crossings.len() == 2).then(|| crossings[1] - crossings[0]);
        let window = period.unwrap_or(ORBIT_FALLBACK_WINDOW);
        let sub = 16;
        let h = window / (n_samples * sub) as f64;
        let dense = oracle::rk4_path(&p, anchor, 0.0, h, n_samples * sub);
        let samples = dense.iter().step_by(sub).take(n_samples).copied().collect();
        Ok(Self {
            anchor,
            period,
            window,
            samples,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitialLaw {
    /// Uniform over stored orbit samples.
    OrbitUniform(Orbit),
    Point(NeuronState),
    /// Uniform over user-supplied states.
    Samples(Vec<NeuronState>),
}

/// Anchor of the experiment orbit.
pub const ORBIT_ANCHOR: NeuronState = NeuronState::new(-0.828, -0.139, 0.589);

impl InitialLaw {
    pub fn orbit_uniform(p: &ModelParams, anchor: NeuronState) -> Result<Self> {
        Ok(Self::OrbitUniform(Orbit::generate(p, anchor, ORBIT_SAMPLES)?))
    }

    pub fn sample(&self, seed: u64, n: usize) -> Vec<NeuronState> {
        let pool: &[NeuronState] = match self {
            InitialLaw::Point(x) => return vec![*x; n],
            InitialLaw::OrbitUniform(o) => &o.samples,
            InitialLaw::Samples(s) => s,
        };
        (0..n)
            .map(|i| {
                let mut rng = init_stream(seed, i);
                pool[rng.random_range(0..pool.len())]
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let pool: &[NeuronState] = match self {
            InitialLaw::Point(x) => std::slice::from_ref(x),
            InitialLaw::OrbitUniform(o) => &o.samples,
            InitialLaw::Samples(s) => s,
        };
        if pool.is_empty() {
            return Err(Error::InvalidParameter("initial law has no samples".into()));
        }
        Ok(())
    }
}

/// The random inputs of a simulation: initial states and Brownian increments.
/// Reusing one ensemble across controls gives common random numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub seed: u64,
    pub initial: Vec<NeuronState>,
    pub noise: NoiseField,
}

impl Ensemble {
    pub fn draw(
        p: &ModelParams,
        grid: &TimeGrid,
        init: &InitialLaw,
        n_particles: usize,
        seed: u64,
        backend: Backend,
    ) -> Result<Self> {
        if n_particles == 0 {
            return Err(Error::InvalidParameter("need at least one particle".into()));
        }
        init.validate()?;
        Ok(Self {
            seed,
            initial: init.sample(seed, n_particles),
            noise: NoiseField::generate(
                seed,
                n_particles,
                grid.n_steps,
                p.noise_channels(),
                grid.dt,
                backend,
            ),
        })
    }

    /// Ensemble with zero noise.
    pub fn noiseless(p: &ModelParams, grid: &TimeGrid, initial: Vec<NeuronState>) -> Self {
        let n = initial.len();
        Self {
            seed: 0,
            initial,
            noise: NoiseField::zeros(n, grid.n_steps, p.noise_channels()),
        }
    }

    pub fn n_particles(&self) -> usize {
        self.initial.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SimOptions {
    pub backend: Backend,
    pub newton: NewtonOptions,
}

/// Particle paths on the grid together with the randomness that produced them.
#[derive(Clone, Debug)]
pub struct TrajectoryBundle {
    pub grid: TimeGrid,
    pub control: ControlGrid,
    /// Layout `[step][particle]`, steps `0..=n_steps`.
    pub states: Vec<Vec<NeuronState>>,
    /// Empirical summary of `states[k]`.
    pub summaries: Vec<MeasureSummary>,
    pub ensemble: Arc<Ensemble>,
}

impl TrajectoryBundle {
    pub fn n_particles(&self) -> usize {
        self.states[0].len()
    }

    pub fn seed(&self) -> u64 {
        self.ensemble.seed
    }

    pub fn noise(&self) -> &NoiseField {
        &self.ensemble.noise
    }
}

/// Simulates `n_particles` neurons with fresh randomness drawn from `seed`.
pub fn simulate(
    p: &ModelParams,
    grid: &TimeGrid,
    ctrl: &ControlGrid,
    init: &InitialLaw,
    n_particles: usize,
    seed: u64,
) -> Result<TrajectoryBundle> {
    let opts = SimOptions::default();
    let ensemble = Ensemble::draw(p, grid, init, n_particles, seed, opts.backend)?;
    simulate_ensemble(p, grid, ctrl, &Arc::new(ensemble), &opts)
}

/// Simulates with given randomness.
pub fn simulate_ensemble(
    p: &ModelParams,
    grid: &TimeGrid,
    ctrl: &ControlGrid,
    ensemble: &Arc<Ensemble>,
    opts: &SimOptions,
) -> Result<TrajectoryBundle> {
    p.validate()?;
    ctrl.check_grid(grid)?;
    let n = ensemble.n_particles();
    if ensemble.noise.n_steps() != grid.n_steps
        || ensemble.noise.n_particles() != n
        || ensemble.noise.channels() != p.noise_channels()
    {
        return Err(Error::GridMismatch(
            "noise field does not match grid, particle count or noise mode".into(),
        ));
    }

    let mut states = Vec::with_capacity(grid.n_steps + 1);
    let mut summaries = Vec::with_capacity(grid.n_steps + 1);
    states.push(ensemble.initial.clone());
    summaries.push(MeasureSummary::from_states(&ensemble.initial));

    for k in 0..grid.n_steps {
        let current = &states[k];
        let summary = summaries[k];
        let alpha = ctrl.values[k];
        let next = opts.backend.try_map(n, |i| {
            let x = &current[i];
            let sigma = p.diffusion(x, &summary, alpha)?;
            let dw = ensemble.noise.increment(k, i);
            let mut kick = Vector3::zeros();
            for (ch, d) in dw.iter().enumerate() {
                kick += sigma.column(ch) * *d;
            }
            implicit_step(p, x, summary.mean_y, alpha, grid.dt, &kick, &opts.newton)
                .map_err(|residual| Error::NewtonDiverged {
                    particle: i,
                    step: k,
                    residual,
                })
        })?;
        summaries.push(MeasureSummary::from_states(&next));
        states.push(next);
    }

    Ok(TrajectoryBundle {
        grid: *grid,
        control: ctrl.clone(),
        states,
        summaries,
        ensemble: Arc::clone(ensemble),
    })
}

/// Solves `X = x + dt·b(X, mean_y, α) + kick` for one particle. On failure
/// returns the final residual.
pub(crate) fn implicit_step(
    p: &ModelParams,
    x: &NeuronState,
    mean_y: f64,
    alpha: f64,
    dt: f64,
    kick: &Vector3<f64>,
    newton: &NewtonOptions,
) -> std::result::Result<NeuronState, f64> {
    let base = x.to_vector() + kick;
    let residual = |z: &Vector3<f64>| z - base - dt * p.drift_mean_y(&NeuronState::from_vector(z), mean_y, alpha);

    let mut z = base;
    let mut r = residual(&z);
    let mut norm = r.amax();
    let mut iterations = 0;
    while norm > newton.tolerance {
        if iterations == newton.max_iterations || !norm.is_finite() {
            return Err(norm);
        }
        iterations += 1;
        let jac = Matrix3::identity() - dt * p.drift_jac_mean_y(&NeuronState::from_vector(&z), mean_y);
        let delta = jac.try_inverse().ok_or(norm)? * r;
        let mut damping = 1.0;
        loop {
            let trial = z - damping * delta;
            let r_trial = residual(&trial);
            let n_trial = r_trial.amax();
            if n_trial < norm || damping < 1e-6 {
                z = trial;
                r = r_trial;
                norm = n_trial;
                break;
            }
            damping *= 0.5;
        }
    }

    // The gating row is linear in y once v is known: solve it exactly so the
    // constraint 0 <= y <= 1 holds to rounding.
    let v = z[0];
    let s = p.a_r * p.sigmoid(v);
    let mut y = (x.y + kick[2] + dt * s) / (1.0 + dt * (s + p.a_d));
    if p.noise_mode == NoiseMode::Full {
        y = y.clamp(0.0, 1.0);
    }
    Ok(NeuronState::new(v, z[1], y))
}

/// Ensemble mean of `v` at every step.
pub fn local_field_potential(traj: &TrajectoryBundle) -> Vec<f64> {
    traj.summaries.iter().map(|s| s.mean_v).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstraintReport {
    pub checked: usize,
    pub violations: usize,
    /// Largest positive value of `π`, zero when there is none.
    pub max_excess: f64,
}

pub fn constraint_report(traj: &TrajectoryBundle, tolerance: f64) -> ConstraintReport {
    constraint_report_states(traj.states.iter().flatten(), tolerance)
}

pub fn constraint_report_states<'a>(
    states: impl IntoIterator<Item = &'a NeuronState>,
    tolerance: f64,
) -> ConstraintReport {
    let mut report = ConstraintReport {
        checked: 0,
        violations: 0,
        max_excess: 0.0,
    };
    for x in states {
        let pi = x.constraint();
        report.checked += 1;
        if pi > tolerance {
            report.violations += 1;
        }
        if pi > report.max_excess {
            report.max_excess = pi;
        }
    }
    report
}

/// `sup_k mean_i |X^i_k|^p`.
pub fn moment_report(traj: &TrajectoryBundle, p_order: u32) -> Result<f64> {
    if !matches!(p_order, 2 | 4 | 6) {
        return Err(Error::InvalidParameter(format!(
            "moment order must be 2, 4 or 6, got {p_order}"
        )));
    }
    let half = (p_order / 2) as i32;
    Ok(traj
        .states
        .iter()
        .map(|step| step.iter().map(|x| x.norm_squared().powi(half)).sum::<f64>() / step.len() as f64)
        .fold(0.0, f64::max))
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Writes `t,mean_v,mean_w,mean_y,std_v,q05_v,q95_v`, one row per grid point.
pub fn write_summary_csv<W: Write>(traj: &TrajectoryBundle, mut out: W) -> Result<()> {
    writeln!(out, "t,mean_v,mean_w,mean_y,std_v,q05_v,q95_v")?;
    let mut vs = Vec::with_capacity(traj.n_particles());
    for (k, (step, s)) in traj.states.iter().zip(&traj.summaries).enumerate() {
        vs.clear();
        vs.extend(step.iter().map(|x| x.v));
        let var = vs.iter().map(|v| (v - s.mean_v).powi(2)).sum::<f64>() / vs.len() as f64;
        vs.sort_by(f64::total_cmp);
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            traj.grid.time(k),
            s.mean_v,
            s.mean_w,
            s.mean_y,
            var.sqrt(),
            quantile_sorted(&vs, 0.05),
            quantile_sorted(&vs, 0.95)
        )?;
    }
    Ok(())
}

/// Full-path dump: one 40-byte little-endian record per (step, particle)
/// holding `step, particle, v, w, y` as `f64`, step-major.
pub fn write_paths_binary<W: Write>(traj: &TrajectoryBundle, mut out: W) -> Result<()> {
    for (k, step) in traj.states.iter().enumerate() {
        for (i, x) in step.iter().enumerate() {
            for value in [k as f64, i as f64, x.v, x.w, x.y] {
                out.write_all(&value.to_le_bytes())?;
            }
        }
    }
    Ok(())
}
