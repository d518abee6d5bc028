//! Projected gradient descent with step halving.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adjoint::{solve_pathwise, solve_regression, AdjointBundle, AdjointOptions, MeanFieldConvention, RegressionParams};
use crate::control::{cost, gradient, project, CostSpec, GradientGrid};
use crate::error::{Error, Result};
use crate::forward::{simulate_ensemble, ControlGrid, Ensemble, InitialLaw, SimOptions, TimeGrid, TrajectoryBundle};
use crate::model::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedPolicy {
    /// Same noise and initial states at every iteration.
    #[default]
    Frozen,
    /// Fresh randomness at every iteration.
    PerIter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjointSolver {
    #[default]
    Pathwise,
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub initial_step: f64,
    /// Stop when the `L²` gradient norm falls below this. `None` means
    /// `1e-3·sqrt(t_end)`.
    pub tolerance: Option<f64>,
    pub max_iters: usize,
    pub max_backtracks: usize,
    pub seed_policy: SeedPolicy,
    pub adjoint: AdjointSolver,
    pub convention: MeanFieldConvention,
    pub regression: RegressionParams,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            initial_step: 1.0,
            tolerance: None,
            max_iters: 50,
            max_backtracks: 30,
            seed_policy: SeedPolicy::Frozen,
            adjoint: AdjointSolver::Pathwise,
            convention: MeanFieldConvention::Swapped,
            regression: RegressionParams::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn tolerance_for(&self, grid: &TimeGrid) -> f64 {
        self.tolerance.unwrap_or(1e-3 * grid.t_end.sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_step > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "initial step must be positive, got {}",
                self.initial_step
            )));
        }
        if let Some(eps) = self.tolerance {
            if !(eps > 0.0) {
                return Err(Error::InvalidParameter(format!("tolerance must be positive, got {eps}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Running,
    Converged,
    /// Every backtrack failed to decrease the cost.
    Stalled,
    MaxIterations,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub iter: usize,
    pub cost: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub control: ControlGrid,
    /// Cost of the initial control.
    pub initial_cost: f64,
    pub cost: f64,
    pub gradient: Option<GradientGrid>,
    pub step: f64,
    pub iterations: usize,
    /// One row per line-search trial. Row cost is the trial cost.
    pub history: Vec<HistoryRow>,
    pub status: Status,
}

impl OptimizerState {
    /// Costs of accepted trials in order, preceded by the initial cost.
    pub fn accepted_costs(&self) -> Vec<f64> {
        std::iter::once(self.initial_cost)
            .chain(self.history.iter().filter(|r| r.accepted).map(|r| r.cost))
            .collect()
    }

    pub fn accepted_iterations(&self) -> usize {
        self.history.iter().filter(|r| r.accepted).count()
    }

    /// `iter,cost,grad_norm,step,accepted`.
    pub fn write_convergence_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "iter,cost,grad_norm,step,accepted")?;
        for r in &self.history {
            writeln!(out, "{},{},{},{},{}", r.iter, r.cost, r.grad_norm, r.step, r.accepted as u8)?;
        }
        Ok(())
    }
}

/// Cost functional as seen by the optimizer.
pub trait Objective {
    fn cost(&mut self, ctrl: &ControlGrid) -> Result<f64>;
    fn cost_and_gradient(&mut self, ctrl: &ControlGrid) -> Result<(f64, GradientGrid)>;
    /// Called once at the start of each outer iteration.
    fn begin_iteration(&mut self, _iter: usize) -> Result<()> {
        Ok(())
    }
}

/// The particle-system tracking problem.
pub struct FhnObjective {
    pub p: ModelParams,
    pub grid: TimeGrid,
    pub spec: CostSpec,
    pub init: InitialLaw,
    pub n_particles: usize,
    pub seed: u64,
    pub policy: SeedPolicy,
    pub solver: AdjointSolver,
    pub adjoint: AdjointOptions,
    pub regression: RegressionParams,
    pub sim: SimOptions,
    ensemble: Arc<Ensemble>,
    last: Option<TrajectoryBundle>,
    last_adjoint: Option<AdjointBundle>,
}

impl FhnObjective {
    pub fn new(
        p: ModelParams,
        grid: TimeGrid,
        spec: CostSpec,
        init: InitialLaw,
        n_particles: usize,
        seed: u64,
        cfg: &OptimizerConfig,
    ) -> Result<Self> {
        spec.check_grid(&grid)?;
        let sim = SimOptions::default();
        let ensemble = Arc::new(Ensemble::draw(&p, &grid, &init, n_particles, seed, sim.backend)?);
        Ok(Self {
            p,
            grid,
            spec,
            init,
            n_particles,
            seed,
            policy: cfg.seed_policy,
            solver: cfg.adjoint,
            adjoint: AdjointOptions {
                convention: cfg.convention,
                ..AdjointOptions::default()
            },
            regression: cfg.regression,
            sim,
            ensemble,
            last: None,
            last_adjoint: None,
        })
    }

    pub fn ensemble(&self) -> &Arc<Ensemble> {
        &self.ensemble
    }

    fn trajectory(&mut self, ctrl: &ControlGrid) -> Result<&TrajectoryBundle> {
        let hit = matches!(&self.last, Some(t) if t.control.values == ctrl.values && Arc::ptr_eq(&t.ensemble, &self.ensemble));
        if !hit {
            self.last = Some(simulate_ensemble(&self.p, &self.grid, ctrl, &self.ensemble, &self.sim)?);
            self.last_adjoint = None;
        }
        Ok(self.last.as_ref().unwrap())
    }

    /// Trajectory and adjoint of the most recent gradient evaluation.
    pub fn last_solution(&self) -> Option<(&TrajectoryBundle, &AdjointBundle)> {
        Some((self.last.as_ref()?, self.last_adjoint.as_ref()?))
    }

    pub fn simulate(&mut self, ctrl: &ControlGrid) -> Result<TrajectoryBundle> {
        self.trajectory(ctrl).cloned()
    }
}

impl Objective for FhnObjective {
    fn cost(&mut self, ctrl: &ControlGrid) -> Result<f64> {
        self.trajectory(ctrl)?;
        cost(self.last.as_ref().unwrap(), &self.spec, ctrl)
    }

    fn cost_and_gradient(&mut self, ctrl: &ControlGrid) -> Result<(f64, GradientGrid)> {
        self.trajectory(ctrl)?;
        let traj = self.last.as_ref().unwrap();
        let c = cost(traj, &self.spec, ctrl)?;
        let adj = match self.solver {
            AdjointSolver::Pathwise => solve_pathwise(&self.p, traj, &self.spec, &self.adjoint)?,
            AdjointSolver::Regression => {
                solve_regression(&self.p, traj, &self.spec, &self.regression, self.adjoint.convention)?
            }
        };
        let g = gradient(traj, &adj, &self.spec)?;
        self.last_adjoint = Some(adj);
        Ok((c, g))
    }

    fn begin_iteration(&mut self, iter: usize) -> Result<()> {
        if self.policy == SeedPolicy::PerIter && iter > 0 {
            let seed = self.seed.wrapping_add((iter as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            self.ensemble = Arc::new(Ensemble::draw(&self.p, &self.grid, &self.init, self.n_particles, seed, self.sim.backend)?);
            self.last = None;
            self.last_adjoint = None;
        }
        Ok(())
    }
}

/// Runs the descent loop on any objective.
pub fn descend_objective<O: Objective>(
    obj: &mut O,
    initial: &ControlGrid,
    cfg: &OptimizerConfig,
    grid: &TimeGrid,
) -> Result<OptimizerState> {
    cfg.validate()?;
    let eps = cfg.tolerance_for(grid);
    let mut ctrl = project(initial);
    let mut step = cfg.initial_step;
    let mut history = Vec::new();
    let mut status = Status::Running;
    let mut initial_cost = None;
    let mut last_cost = f64::NAN;
    let mut last_grad = None;
    let mut iterations = 0;

    for iter in 0..=cfg.max_iters {
        obj.begin_iteration(iter)?;
        let (c, g) = obj.cost_and_gradient(&ctrl)?;
        initial_cost.get_or_insert(c);
        last_cost = c;
        let gn = g.l2_norm();
        iterations = iter;
        if gn < eps {
            last_grad = Some(g);
            status = Status::Converged;
            break;
        }
        if iter == cfg.max_iters {
            last_grad = Some(g);
            status = Status::MaxIterations;
            break;
        }
        let mut accepted = false;
        for _ in 0..=cfg.max_backtracks {
            let trial_values: Vec<f64> = ctrl.values.iter().zip(&g.values).map(|(a, d)| a - step * d).collect();
            let trial = project(&ControlGrid {
                values: trial_values,
                alpha_min: ctrl.alpha_min,
                alpha_max: ctrl.alpha_max,
            });
            let tc = obj.cost(&trial)?;
            let ok = tc < c;
            history.push(HistoryRow {
                iter,
                cost: tc,
                grad_norm: gn,
                step,
                accepted: ok,
            });
            if ok {
                ctrl = trial;
                last_cost = tc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        last_grad = Some(g);
        if !accepted {
            status = Status::Stalled;
            break;
        }
    }

    Ok(OptimizerState {
        control: ctrl,
        initial_cost: initial_cost.unwrap_or(last_cost),
        cost: last_cost,
        gradient: last_grad,
        step,
        iterations,
        history,
        status,
    })
}

/// Projected gradient descent on the particle tracking problem.
#[allow(clippy::too_many_arguments)]
pub fn descend(
    p: &ModelParams,
    grid: &TimeGrid,
    spec: &CostSpec,
    init: &InitialLaw,
    initial: &ControlGrid,
    n_particles: usize,
    seed: u64,
    cfg: &OptimizerConfig,
) -> Result<(OptimizerState, FhnObjective)> {
    let mut obj = FhnObjective::new(p.clone(), *grid, spec.clone(), init.clone(), n_particles, seed, cfg)?;
    let state = descend_objective(&mut obj, initial, cfg, grid)?;
    Ok((state, obj))
}
