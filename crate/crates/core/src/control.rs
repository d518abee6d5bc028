//! Tracking cost, Hamiltonian, gradient assembly and box projection.

use std::io::Write;

use nalgebra::{Matrix3, Vector3};

use crate::adjoint::AdjointBundle;
use crate::error::{Error, Result};
use crate::forward::{ControlGrid, TimeGrid, TrajectoryBundle};
use crate::model::{MeasureSummary, ModelParams, NeuronState};

/// Running cost `(mean_v - v̄_t)² + penalty·α²`, zero terminal cost.
#[derive(Clone, Debug, PartialEq)]
pub struct CostSpec {
    /// `v̄` at every grid point, `n_steps + 1` values.
    pub reference: Vec<f64>,
    pub control_penalty: f64,
}

impl CostSpec {
    pub fn tracking(reference: Vec<f64>) -> Self {
        Self {
            reference,
            control_penalty: 0.0,
        }
    }

    pub fn with_penalty(mut self, weight: f64) -> Self {
        self.control_penalty = weight;
        self
    }

    pub fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if self.reference.len() != grid.n_steps + 1 {
            return Err(Error::GridMismatch(format!(
                "reference has {} values, grid has {} points",
                self.reference.len(),
                grid.n_steps + 1
            )));
        }
        Ok(())
    }

    /// Running cost at grid point `k`.
    pub fn running(&self, k: usize, mean_v: f64, alpha: f64) -> f64 {
        (mean_v - self.reference[k]).powi(2) + self.control_penalty * alpha * alpha
    }
}

/// Left-endpoint quadrature `Σ_{k<n} dt·f(t_k)`.
pub fn cost(traj: &TrajectoryBundle, spec: &CostSpec, ctrl: &ControlGrid) -> Result<f64> {
    let grid = &traj.grid;
    spec.check_grid(grid)?;
    ctrl.check_grid(grid)?;
    Ok((0..grid.n_steps)
        .map(|k| grid.dt * spec.running(k, traj.summaries[k].mean_v, ctrl.values[k]))
        .sum())
}

/// `H = <b, P> + <σ, Q> + f` at grid point `k`. `q` may be omitted when the
/// second adjoint component is not available.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(
    p: &ModelParams,
    spec: &CostSpec,
    k: usize,
    x: &NeuronState,
    m: &MeasureSummary,
    costate: &Vector3<f64>,
    q: Option<&Matrix3<f64>>,
    alpha: f64,
) -> Result<f64> {
    let mut h = p.drift(x, m, alpha).dot(costate) + spec.running(k, m.mean_v, alpha);
    if let Some(q) = q {
        h += p.diffusion(x, m, alpha)?.component_mul(q).sum();
    }
    Ok(h)
}

/// Gradient density of the cost on each control interval.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientGrid {
    pub values: Vec<f64>,
    pub dt: f64,
}

impl GradientGrid {
    pub fn new(values: Vec<f64>, dt: f64) -> Self {
        Self { values, dt }
    }

    /// `sqrt(Σ dt·g_k²)`.
    pub fn l2_norm(&self) -> f64 {
        self.dot(&self.values).sqrt()
    }

    /// `Σ dt·g_k·β_k`.
    pub fn dot(&self, beta: &[f64]) -> f64 {
        assert_eq!(beta.len(), self.values.len());
        self.values.iter().zip(beta).map(|(g, b)| self.dt * g * b).sum()
    }

    /// `‖g - other‖ / ‖other‖` in the discrete `L²` norm.
    pub fn relative_error(&self, other: &GradientGrid) -> f64 {
        let diff: Vec<f64> = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        GradientGrid::new(diff, self.dt).l2_norm() / other.l2_norm()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,grad")?;
        for (k, g) in self.values.iter().enumerate() {
            writeln!(out, "{},{}", k as f64 * self.dt, g)?;
        }
        Ok(())
    }
}

/// `∇J(α)_k = mean_i P¹_{k+1} + 2·penalty·α_k`.
///
/// The control acting on `[t_k, t_{k+1})` enters the implicit step that
/// produces `X_{k+1}`, so it pairs with the costate at `k + 1`.
pub fn gradient(traj: &TrajectoryBundle, adj: &AdjointBundle, spec: &CostSpec) -> Result<GradientGrid> {
    let grid = &traj.grid;
    if adj.p.len() != grid.n_steps + 1 {
        return Err(Error::GridMismatch(format!(
            "adjoint has {} points, grid has {}",
            adj.p.len(),
            grid.n_steps + 1
        )));
    }
    let values = (0..grid.n_steps)
        .map(|k| {
            let step = &adj.p[k + 1];
            let mean = step.iter().map(|v| v[0]).sum::<f64>() / step.len() as f64;
            mean + 2.0 * spec.control_penalty * traj.control.values[k]
        })
        .collect();
    Ok(GradientGrid::new(values, grid.dt))
}

pub fn project_values(values: &[f64], alpha_min: f64, alpha_max: f64) -> Vec<f64> {
    values.iter().map(|a| a.clamp(alpha_min, alpha_max)).collect()
}

/// Componentwise clamp into the control box.
pub fn project(ctrl: &ControlGrid) -> ControlGrid {
    ControlGrid {
        values: project_values(&ctrl.values, ctrl.alpha_min, ctrl.alpha_max),
        alpha_min: ctrl.alpha_min,
        alpha_max: ctrl.alpha_max,
    }
}
