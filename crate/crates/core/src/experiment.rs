//! Experiment configuration, reference profiles and the full optimization run.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adjoint::AdjointBundle;
use crate::control::CostSpec;
use crate::error::{Error, Result};
use crate::forward::{
    local_field_potential, simulate, write_summary_csv, ControlGrid, InitialLaw, TimeGrid, TrajectoryBundle,
};
use crate::io::{create, write_series_csv};
use crate::model::{ModelParams, NeuronState};
use crate::optimize::{descend, OptimizerConfig, OptimizerState, Status};
use crate::oracle::integrate_reference;

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "FHN_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub t_end: f64,
    pub dt: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { t_end: 200.0, dt: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Constant starting control.
    pub initial: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            alpha_min: -2.0,
            alpha_max: 2.0,
            initial: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// Network LFP after a short input pulse, then the resting potential.
    #[default]
    PulseLfp,
    /// Deterministic single-neuron `v` path at constant input.
    ConstantAlpha,
    /// Constant resting potential.
    Resting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    pub reference: ReferenceKind,
    pub pulse_magnitude: f64,
    pub pulse_duration: f64,
    /// Time after which the pulse reference switches to the resting value.
    pub stitch_time: f64,
    /// Coupling of the network that generates the pulse reference. Kept
    /// separate from `model.j` so the uncoupled problem tracks the same profile.
    pub reference_j: f64,
    /// Seed of the reference network; `run.seed + 1` when absent.
    pub reference_seed: Option<u64>,
    pub reference_alpha: f64,
    pub control_penalty: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            reference: ReferenceKind::PulseLfp,
            pulse_magnitude: 0.8,
            pulse_duration: 7.0,
            stitch_time: 100.0,
            reference_j: 0.46,
            reference_seed: None,
            reference_alpha: 0.33,
            control_penalty: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub n_particles: usize,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_particles: 1000,
            seed: 1,
            out_dir: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    #[default]
    OrbitUniform,
    Point,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub kind: InitKind,
    /// Orbit seed for `orbit_uniform`, the state itself for `point`.
    pub anchor: [f64; 3],
    /// Coupling of the deterministic system whose orbit is sampled.
    pub orbit_j: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            kind: InitKind::OrbitUniform,
            anchor: [-0.828, -0.139, 0.589],
            orbit_j: 0.46,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelParams,
    pub grid: GridConfig,
    pub control: ControlConfig,
    pub cost: CostConfig,
    pub optimizer: OptimizerConfig,
    pub run: RunConfig,
    pub init: InitConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Same run at `N = 200`.
    pub fn desk_preset() -> Self {
        let mut cfg = Self::default();
        cfg.run.n_particles = 200;
        cfg
    }

    /// The uncoupled variant: identical except for `model.j`.
    pub fn uncoupled(&self) -> Self {
        let mut cfg = self.clone();
        cfg.model.j = 0.0;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.time_grid()?;
        self.optimizer.validate()?;
        if !(self.control.alpha_min <= self.control.initial && self.control.initial <= self.control.alpha_max) {
            return Err(Error::Config(format!(
                "initial control {} outside [{}, {}]",
                self.control.initial, self.control.alpha_min, self.control.alpha_max
            )));
        }
        if self.run.n_particles == 0 {
            return Err(Error::Config("run.n_particles must be at least 1".into()));
        }
        if !(self.cost.pulse_duration >= 0.0 && self.cost.stitch_time >= 0.0) {
            return Err(Error::Config("pulse duration and stitch time must be non-negative".into()));
        }
        if !(self.cost.control_penalty >= 0.0) {
            return Err(Error::Config("control penalty must be non-negative".into()));
        }
        Ok(())
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.t_end, self.grid.dt)
    }

    pub fn initial_control(&self) -> Result<ControlGrid> {
        ControlGrid::constant(&self.time_grid()?, self.control.initial, self.control.alpha_min, self.control.alpha_max)
    }

    pub fn initial_law(&self) -> Result<InitialLaw> {
        let [v, w, y] = self.init.anchor;
        let anchor = NeuronState::new(v, w, y);
        match self.init.kind {
            InitKind::Point => Ok(InitialLaw::Point(anchor)),
            InitKind::OrbitUniform => {
                let orbit_params = ModelParams {
                    j: self.init.orbit_j,
                    ..self.model.clone()
                };
                InitialLaw::orbit_uniform(&orbit_params, anchor)
            }
        }
    }

    pub fn reference_seed(&self) -> u64 {
        self.cost.reference_seed.unwrap_or(self.run.seed.wrapping_add(1))
    }

    /// Output directory: explicit setting, else `$FHN_OUT_DIR`, else `out`.
    pub fn output_dir(&self) -> PathBuf {
        self.run
            .out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

/// Reference LFP on every grid point with a note on how it was made.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceProfile {
    pub values: Vec<f64>,
    pub kind: ReferenceKind,
    pub provenance: String,
}

impl ReferenceProfile {
    pub fn write_csv<W: Write>(&self, out: W, dt: f64) -> Result<()> {
        write_series_csv(out, "t,reference", dt, &self.values)
    }
}

/// Resting potential of one uncoupled, unforced neuron.
pub fn resting_potential(p: &ModelParams) -> f64 {
    p.uncoupled().uncoupled_rest_point(0.0).v
}

pub fn resting_reference(p: &ModelParams, grid: &TimeGrid) -> ReferenceProfile {
    let v = resting_potential(p);
    ReferenceProfile {
        values: vec![v; grid.n_steps + 1],
        kind: ReferenceKind::Resting,
        provenance: format!("uncoupled rest point v = {v}"),
    }
}

pub fn constant_alpha_reference(p: &ModelParams, grid: &TimeGrid, alpha: f64) -> Result<ReferenceProfile> {
    let single = p.uncoupled().deterministic();
    let x0 = single.uncoupled_rest_point(0.0);
    let ctrl = ControlGrid::unconstrained(vec![alpha; grid.n_steps]);
    let sol = integrate_reference(&single, grid, &ctrl, x0)?;
    Ok(ReferenceProfile {
        values: sol.grid_values().iter().map(|x| x.v).collect(),
        kind: ReferenceKind::ConstantAlpha,
        provenance: format!("deterministic single neuron, alpha = {alpha}, from the alpha = 0 rest point"),
    })
}

/// Network LFP under a pulse of `magnitude` on the first `duration` time
/// units, replaced by the resting potential after `stitch_time`.
#[allow(clippy::too_many_arguments)]
pub fn pulse_lfp_reference(
    p: &ModelParams,
    grid: &TimeGrid,
    init: &InitialLaw,
    n_particles: usize,
    seed: u64,
    magnitude: f64,
    duration: f64,
    stitch_time: f64,
) -> Result<ReferenceProfile> {
    let pulse_steps = ((duration / grid.dt).round() as usize).min(grid.n_steps);
    let values: Vec<f64> = (0..grid.n_steps).map(|k| if k < pulse_steps { magnitude } else { 0.0 }).collect();
    let ctrl = ControlGrid::unconstrained(values);
    let traj = simulate(p, grid, &ctrl, init, n_particles, seed)?;
    let lfp = local_field_potential(&traj);
    let rest = resting_potential(p);
    let values = lfp
        .iter()
        .enumerate()
        .map(|(k, v)| if grid.time(k) <= stitch_time + 1e-9 { *v } else { rest })
        .collect();
    Ok(ReferenceProfile {
        values,
        kind: ReferenceKind::PulseLfp,
        provenance: format!(
            "network LFP (J = {}, N = {n_particles}, seed = {seed}) with input {magnitude} on [0, {duration}), \
             rest potential {rest} after t = {stitch_time}",
            p.j
        ),
    })
}

pub fn make_reference(cfg: &ExperimentConfig) -> Result<ReferenceProfile> {
    let grid = cfg.time_grid()?;
    match cfg.cost.reference {
        ReferenceKind::Resting => Ok(resting_reference(&cfg.model, &grid)),
        ReferenceKind::ConstantAlpha => constant_alpha_reference(&cfg.model, &grid, cfg.cost.reference_alpha),
        ReferenceKind::PulseLfp => {
            let p = ModelParams {
                j: cfg.cost.reference_j,
                ..cfg.model.clone()
            };
            pulse_lfp_reference(
                &p,
                &grid,
                &cfg.initial_law()?,
                cfg.run.n_particles,
                cfg.reference_seed(),
                cfg.cost.pulse_magnitude,
                cfg.cost.pulse_duration,
                cfg.cost.stitch_time,
            )
        }
    }
}

pub fn cost_spec(cfg: &ExperimentConfig, reference: &ReferenceProfile) -> CostSpec {
    CostSpec::tracking(reference.values.clone()).with_penalty(cfg.cost.control_penalty)
}

/// SHA-256 over `blob <len>\0<content>`, hex encoded.
pub fn content_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    let mut out = String::with_capacity(64);
    for b in h.finalize().iter() {
        write!(out, "{b:02x}").unwrap();
    }
    out
}

/// Plain-text run record. The output directory is not an input and is left
/// out, so reruns into different directories give identical manifests.
pub fn write_manifest<W: Write>(mut out: W, cfg: &ExperimentConfig, extra: &[(&str, String)]) -> Result<()> {
    let mut inputs = cfg.clone();
    inputs.run.out_dir = None;
    let text = inputs.to_toml();
    writeln!(out, "fhn-control run manifest")?;
    writeln!(out, "version: {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(out, "seed: {}", inputs.run.seed)?;
    writeln!(out, "reference_seed: {}", inputs.reference_seed())?;
    writeln!(out, "config_hash: {}", content_hash(text.as_bytes()))?;
    for (k, v) in extra {
        writeln!(out, "{k}: {v}")?;
    }
    writeln!(out, "--- config ---")?;
    write!(out, "{text}")?;
    Ok(())
}

pub fn write_control_csv<W: Write>(out: W, ctrl: &ControlGrid, dt: f64) -> Result<()> {
    write_series_csv(out, "t,alpha", dt, &ctrl.values)
}

#[derive(Debug)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub reference: ReferenceProfile,
    pub state: OptimizerState,
    /// Cost of the initial control.
    pub baseline_cost: f64,
    pub trajectory: TrajectoryBundle,
    pub adjoint: AdjointBundle,
}

fn status_name(s: Status) -> &'static str {
    match s {
        Status::Running => "running",
        Status::Converged => "converged",
        Status::Stalled => "stalled",
        Status::MaxIterations => "max_iterations",
    }
}

/// Generates the reference, runs the descent and writes every artifact into
/// `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let grid = cfg.time_grid()?;
    let reference = make_reference(cfg)?;
    let spec = cost_spec(cfg, &reference);
    let init = cfg.initial_law()?;
    let (state, mut obj) = descend(
        &cfg.model,
        &grid,
        &spec,
        &init,
        &cfg.initial_control()?,
        cfg.run.n_particles,
        cfg.run.seed,
        &cfg.optimizer,
    )?;
    // The final iterate's gradient evaluation left its trajectory and adjoint
    // in the cache; recompute if a rejected trial displaced it.
    let (trajectory, adjoint) = match obj.last_solution() {
        Some((t, a)) if t.control.values == state.control.values => (t.clone(), a.clone()),
        _ => {
            use crate::optimize::Objective;
            obj.cost_and_gradient(&state.control)?;
            let (t, a) = obj.last_solution().expect("just computed");
            (t.clone(), a.clone())
        }
    };
    let gradient = crate::control::gradient(&trajectory, &adjoint, &spec)?;

    std::fs::create_dir_all(out_dir)?;
    write_control_csv(create(&out_dir.join("control.csv"))?, &state.control, grid.dt)?;
    write_summary_csv(&trajectory, create(&out_dir.join("lfp.csv"))?)?;
    reference.write_csv(create(&out_dir.join("reference.csv"))?, grid.dt)?;
    state.write_convergence_csv(create(&out_dir.join("convergence.csv"))?)?;
    adjoint.write_mean_csv(create(&out_dir.join("adjoint_mean.csv"))?)?;
    gradient.write_csv(create(&out_dir.join("gradient.csv"))?)?;
    write_manifest(
        create(&out_dir.join("manifest.txt"))?,
        cfg,
        &[
            ("status", status_name(state.status).to_string()),
            ("iterations", state.iterations.to_string()),
            ("initial_cost", state.initial_cost.to_string()),
            ("final_cost", state.cost.to_string()),
            ("control_power_integral_r6", state.control.power_integral(6.0, grid.dt).to_string()),
            ("reference", reference.provenance.clone()),
        ],
    )?;

    Ok(RunReport {
        out_dir: out_dir.to_path_buf(),
        baseline_cost: state.initial_cost,
        reference,
        state,
        trajectory,
        adjoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(cfg.run.n_particles, 1000);
        assert_eq!(ExperimentConfig::desk_preset().run.n_particles, 200);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("[model]\nj = 0.1\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[nonsense]\n").is_err());
        let cfg = ExperimentConfig::from_toml_str("[model]\nj = 0.1\n[grid]\nt_end = 10.0\n").unwrap();
        assert_eq!(cfg.model.j, 0.1);
        assert_eq!(cfg.grid.t_end, 10.0);
        assert_eq!(cfg.model.a, 0.7);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("[grid]\ndt = 0.3\nt_end = 1.0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[control]\ninitial = 5.0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[run]\nn_particles = 0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[model]\na_d = -1.0\n").is_err());
    }

    #[test]
    fn uncoupled_variant_differs_only_in_coupling() {
        let a = ExperimentConfig::default();
        let mut b = a.uncoupled();
        assert_eq!(b.model.j, 0.0);
        b.model.j = a.model.j;
        assert_eq!(a, b);
    }

    #[test]
    fn resting_reference_is_the_rest_point() {
        let p = ModelParams::default();
        let grid = TimeGrid::new(10.0, 0.1).unwrap();
        let r = resting_reference(&p, &grid);
        assert_eq!(r.values.len(), grid.n_steps + 1);
        assert!(r.values.iter().all(|v| (v + 1.199408035244035).abs() < 1e-12));
    }

    #[test]
    fn zero_pulse_gives_uncontrolled_lfp() {
        let p = ModelParams::default();
        let grid = TimeGrid::new(20.0, 0.1).unwrap();
        let init = InitialLaw::orbit_uniform(&p, crate::forward::ORBIT_ANCHOR).unwrap();
        let r = pulse_lfp_reference(&p, &grid, &init, 30, 4, 0.0, 7.0, 10.0).unwrap();
        let ctrl = ControlGrid::constant(&grid, 0.0, -1.0, 1.0).unwrap();
        let lfp = local_field_potential(&simulate(&p, &grid, &ctrl, &init, 30, 4).unwrap());
        let rest = resting_potential(&p);
        for k in 0..=grid.n_steps {
            let expected = if k <= 100 { lfp[k] } else { rest };
            assert_eq!(r.values[k], expected, "k = {k}");
        }
    }

    #[test]
    fn constant_alpha_reference_matches_oracle() {
        let p = ModelParams::default();
        let grid = TimeGrid::new(30.0, 0.1).unwrap();
        let r = constant_alpha_reference(&p, &grid, 0.33).unwrap();
        let single = p.uncoupled().deterministic();
        let ctrl = ControlGrid::unconstrained(vec![0.33; grid.n_steps]);
        let sol = integrate_reference(&single, &grid, &ctrl, single.uncoupled_rest_point(0.0)).unwrap();
        assert_eq!(r.values[grid.n_steps], sol.at_grid(grid.n_steps).v);
    }

    #[test]
    fn hash_is_git_style() {
        // `printf 'hello\n' | git hash-object --object-format=sha256 --stdin`
        assert_eq!(
            content_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }
}
