//! Backward costate solves along a frozen forward run.
//!
//! The default pathwise solver is the exact transpose of the linearized
//! forward scheme. With `P_n = 0` it reads, for `m = n-1, …, 0`,
//!
//! ```text
//! (I - dt·B_mᵀ) P_m = P_{m+1} + dt·(d_m e₁ + κ_{m+1} e₃)
//! ```
//!
//! with `B_m = b_x(X_m, ȳ_{m-1})` (the Jacobian of the implicit step that
//! produced `X_m`), `d_m = 2(v̄_m - v̄ref_m)` and `κ_{m+1}` the mean-field
//! coupling. Pairing with the variation process then holds to rounding.

use std::io::Write;

use nalgebra::{Matrix3, Vector3};

use crate::control::CostSpec;
use crate::error::{Error, Result};
use crate::exec::Backend;
use crate::forward::TrajectoryBundle;
use crate::model::{MeasureSummary, ModelParams, NeuronState, NoiseMode};

pub use rbf::RbfModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanFieldConvention {
    /// Coupling term `-J·mean_j (v^j - V_rev) P^{j,1}` on every particle.
    #[default]
    Swapped,
    /// Coupling term `-J (v^i - V_rev)·mean_j P^{j,1}` on particle `i`.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stepping {
    /// Implicit in `P`; exact discrete adjoint of the forward scheme.
    #[default]
    Implicit,
    /// `P_m = P_{m+1} + dt·F(step m+1)`.
    Explicit,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AdjointOptions {
    pub convention: MeanFieldConvention,
    pub stepping: Stepping,
    pub backend: Backend,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdjointMode {
    Pathwise,
    RbfRegression,
}

/// Costates on the grid.
#[derive(Clone, Debug)]
pub struct AdjointBundle {
    pub mode: AdjointMode,
    pub dt: f64,
    /// Layout `[step][particle]`, steps `0..=n_steps`.
    pub p: Vec<Vec<Vector3<f64>>>,
    /// Regression mode only: `[step][particle]`, steps `0..n_steps`. Column
    /// `k` pairs with Brownian channel `k`.
    pub q: Option<Vec<Vec<Matrix3<f64>>>>,
}

impl AdjointBundle {
    pub fn mean_p(&self) -> Vec<Vector3<f64>> {
        self.p
            .iter()
            .map(|step| step.iter().sum::<Vector3<f64>>() / step.len() as f64)
            .collect()
    }

    /// `t,mean_P1,mean_P2,mean_P3`.
    pub fn write_mean_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,mean_P1,mean_P2,mean_P3")?;
        for (k, m) in self.mean_p().iter().enumerate() {
            writeln!(out, "{},{},{},{}", k as f64 * self.dt, m[0], m[1], m[2])?;
        }
        Ok(())
    }

    /// `P¹` of the first `n_paths` particles, one column each.
    pub fn write_p1_paths_csv<W: Write>(&self, n_paths: usize, mut out: W) -> Result<()> {
        let n = n_paths.min(self.p[0].len());
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((0..n).map(|i| format!("P1_{i}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for (k, step) in self.p.iter().enumerate() {
            write!(out, "{}", k as f64 * self.dt)?;
            for x in &step[..n] {
                write!(out, ",{}", x[0])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Mean-field term added to the third costate component of each particle.
fn coupling_terms(
    p: &ModelParams,
    states: &[NeuronState],
    costates: &[Vector3<f64>],
    convention: MeanFieldConvention,
) -> Vec<f64> {
    let n = states.len() as f64;
    match convention {
        MeanFieldConvention::Swapped => {
            let k = states
                .iter()
                .zip(costates)
                .map(|(x, q)| -p.j * (x.v - p.v_rev) * q[0])
                .sum::<f64>()
                / n;
            vec![k; states.len()]
        }
        MeanFieldConvention::Literal => {
            let mean_p1 = costates.iter().map(|q| q[0]).sum::<f64>() / n;
            states.iter().map(|x| -p.j * (x.v - p.v_rev) * mean_p1).collect()
        }
    }
}

/// Costate rate `b_xᵀP + coupling·e₃ + 2(mean_v - v̄)·e₁` for every particle
/// at one time, with `b_x` evaluated at `summary.mean_y`.
pub fn adjoint_drift(
    p: &ModelParams,
    states: &[NeuronState],
    costates: &[Vector3<f64>],
    summary: &MeasureSummary,
    reference: f64,
    convention: MeanFieldConvention,
) -> Vec<Vector3<f64>> {
    let drive = 2.0 * (summary.mean_v - reference);
    let kappa = coupling_terms(p, states, costates, convention);
    states
        .iter()
        .zip(costates)
        .zip(kappa)
        .map(|((x, q), k)| {
            p.drift_jac_mean_y(x, summary.mean_y).transpose() * q + Vector3::new(drive, 0.0, k)
        })
        .collect()
}

/// Coefficients of a backward sweep. Exposed so that frozen linear problems
/// can be run through the same recursion as the model.
pub trait BackwardCoefficients: Sync {
    /// State Jacobian for particle `i` at state `x` given the barycenter.
    fn jacobian(&self, i: usize, x: &NeuronState, mean_y: f64) -> Matrix3<f64>;
    /// Particle-independent drive at grid point `m`.
    fn drive(&self, m: usize) -> Vector3<f64>;
    /// Mean-field term on the third component, or `None` when uncoupled.
    fn coupling(&self, states: &[NeuronState], costates: &[Vector3<f64>]) -> Option<Vec<f64>>;
}

struct ModelCoefficients<'a> {
    p: &'a ModelParams,
    drive: Vec<f64>,
    convention: MeanFieldConvention,
}

impl BackwardCoefficients for ModelCoefficients<'_> {
    fn jacobian(&self, _i: usize, x: &NeuronState, mean_y: f64) -> Matrix3<f64> {
        self.p.drift_jac_mean_y(x, mean_y)
    }

    fn drive(&self, m: usize) -> Vector3<f64> {
        Vector3::new(self.drive[m], 0.0, 0.0)
    }

    fn coupling(&self, states: &[NeuronState], costates: &[Vector3<f64>]) -> Option<Vec<f64>> {
        (self.p.j != 0.0).then(|| coupling_terms(self.p, states, costates, self.convention))
    }
}

fn tracking_drive(traj: &TrajectoryBundle, spec: &CostSpec) -> Vec<f64> {
    traj.summaries
        .iter()
        .zip(&spec.reference)
        .map(|(s, r)| 2.0 * (s.mean_v - r))
        .collect()
}

/// Pathwise backward solve. Requires external-only noise, where the second
/// adjoint component does not enter the costate dynamics.
pub fn solve_pathwise(
    p: &ModelParams,
    traj: &TrajectoryBundle,
    spec: &CostSpec,
    opts: &AdjointOptions,
) -> Result<AdjointBundle> {
    if p.noise_mode != NoiseMode::ExternalOnly {
        return Err(Error::UnsupportedMode(
            "pathwise adjoint requires external-only noise; use the regression solver".into(),
        ));
    }
    spec.check_grid(&traj.grid)?;
    let coeffs = ModelCoefficients {
        p,
        drive: tracking_drive(traj, spec),
        convention: opts.convention,
    };
    solve_pathwise_with(traj, &coeffs, opts)
}

/// Backward sweep with arbitrary coefficients.
pub fn solve_pathwise_with<C: BackwardCoefficients>(
    traj: &TrajectoryBundle,
    coeffs: &C,
    opts: &AdjointOptions,
) -> Result<AdjointBundle> {
    let n_steps = traj.grid.n_steps;
    let dt = traj.grid.dt;
    let n = traj.n_particles();
    let mut p = vec![Vec::new(); n_steps + 1];
    p[n_steps] = vec![Vector3::zeros(); n];
    for m in (0..n_steps).rev() {
        let next = &p[m + 1];
        let kappa = coeffs.coupling(&traj.states[m + 1], next);
        let current = match opts.stepping {
            Stepping::Implicit => {
                let drive = coeffs.drive(m);
                let ybar = traj.summaries[m.saturating_sub(1)].mean_y;
                let states = &traj.states[m];
                opts.backend.try_map(n, |i| {
                    let mut rhs = next[i] + dt * drive;
                    if let Some(k) = &kappa {
                        rhs[2] += dt * k[i];
                    }
                    let step = Matrix3::identity() - dt * coeffs.jacobian(i, &states[i], ybar).transpose();
                    step.try_inverse()
                        .map(|inv| inv * rhs)
                        .ok_or(Error::SingularStep { particle: i, step: m })
                })?
            }
            Stepping::Explicit => {
                let drive = coeffs.drive(m + 1);
                let ybar = traj.summaries[m + 1].mean_y;
                let states = &traj.states[m + 1];
                opts.backend.map(n, |i| {
                    let mut rate = coeffs.jacobian(i, &states[i], ybar).transpose() * next[i] + drive;
                    if let Some(k) = &kappa {
                        rate[2] += k[i];
                    }
                    next[i] + dt * rate
                })
            }
        };
        p[m] = current;
    }
    Ok(AdjointBundle {
        mode: AdjointMode::Pathwise,
        dt,
        p,
        q: None,
    })
}

/// Gaussian radial basis regression.
pub mod rbf {
    use nalgebra::{DMatrix, DVector, Vector3};

    use crate::error::{Error, Result};

    /// Reciprocal condition (ratio of extreme `R` diagonal entries) below
    /// which a fit is rejected.
    const RCOND_MIN: f64 = 1e-13;

    #[derive(Clone, Debug)]
    pub struct RbfModel {
        pub nodes: Vec<Vector3<f64>>,
        pub delta: f64,
        pub lambda_ridge: f64,
        /// `L × outputs`.
        pub weights: DMatrix<f64>,
    }

    fn kernel(x: &Vector3<f64>, node: &Vector3<f64>, delta: f64) -> f64 {
        (-(x - node).norm_squared() / (2.0 * delta)).exp()
    }

    /// `A_{ij} = exp(-|x_i - x_j|²/(2δ))`.
    pub fn design_matrix(features: &[Vector3<f64>], nodes: &[Vector3<f64>], delta: f64) -> DMatrix<f64> {
        DMatrix::from_fn(features.len(), nodes.len(), |i, j| kernel(&features[i], &nodes[j], delta))
    }

    /// Median of the squared pairwise node distances; 1 if all nodes coincide.
    pub fn median_bandwidth(nodes: &[Vector3<f64>]) -> f64 {
        let mut d: Vec<f64> = Vec::with_capacity(nodes.len() * nodes.len().saturating_sub(1) / 2);
        for i in 0..nodes.len() {
            for j in i + 1..nodes.len() {
                d.push((nodes[i] - nodes[j]).norm_squared());
            }
        }
        if d.is_empty() {
            return 1.0;
        }
        d.sort_by(f64::total_cmp);
        let med = d[d.len() / 2];
        if med > 0.0 {
            med
        } else {
            d.last().copied().filter(|x| *x > 0.0).unwrap_or(1.0)
        }
    }

    /// `1e-8·‖A‖_F² / L`: small relative to the mean squared column norm.
    pub fn default_ridge(a: &DMatrix<f64>) -> f64 {
        1e-8 * a.norm_squared() / a.ncols().max(1) as f64
    }

    /// Minimizes `‖T - A W‖² + λ‖W‖²` column by column through a QR
    /// factorization of `[A; √λ I]`.
    pub fn fit_design(a: &DMatrix<f64>, targets: &DMatrix<f64>, lambda_ridge: f64) -> Result<DMatrix<f64>> {
        let (m, l) = a.shape();
        if l == 0 || m == 0 {
            return Err(Error::InvalidParameter("RBF fit needs at least one node and one sample".into()));
        }
        if targets.nrows() != m {
            return Err(Error::GridMismatch(format!(
                "{} targets for {} samples",
                targets.nrows(),
                m
            )));
        }
        if !(lambda_ridge >= 0.0) {
            return Err(Error::InvalidParameter(format!("ridge weight {lambda_ridge} < 0")));
        }
        if lambda_ridge == 0.0 && m < l {
            return Err(Error::IllConditioned { rcond: 0.0 });
        }
        let rows = if lambda_ridge > 0.0 { m + l } else { m };
        let mut aug = DMatrix::zeros(rows, l);
        aug.rows_mut(0, m).copy_from(a);
        let mut rhs = DMatrix::zeros(rows, targets.ncols());
        rhs.rows_mut(0, m).copy_from(targets);
        if lambda_ridge > 0.0 {
            let s = lambda_ridge.sqrt();
            for j in 0..l {
                aug[(m + j, j)] = s;
            }
        }
        let qr = aug.qr();
        let r = qr.r();
        let diag = r.diagonal().map(f64::abs);
        let rcond = diag.min() / diag.max();
        if !(rcond > RCOND_MIN) {
            return Err(Error::IllConditioned { rcond });
        }
        let qtb = qr.q().transpose() * rhs;
        r.solve_upper_triangular(&qtb).ok_or(Error::IllConditioned { rcond })
    }

    /// Fits one weight column per target column.
    pub fn fit(
        features: &[Vector3<f64>],
        targets: &DMatrix<f64>,
        nodes: Vec<Vector3<f64>>,
        delta: f64,
        lambda_ridge: f64,
    ) -> Result<RbfModel> {
        if !(delta > 0.0) {
            return Err(Error::InvalidParameter(format!("bandwidth must be positive, got {delta}")));
        }
        let a = design_matrix(features, &nodes, delta);
        let weights = fit_design(&a, targets, lambda_ridge)?;
        Ok(RbfModel {
            nodes,
            delta,
            lambda_ridge,
            weights,
        })
    }

    impl RbfModel {
        pub fn predict(&self, x: &Vector3<f64>) -> DVector<f64> {
            let phi = DVector::from_iterator(self.nodes.len(), self.nodes.iter().map(|n| kernel(x, n, self.delta)));
            self.weights.tr_mul(&phi)
        }

        pub fn predict_many(&self, features: &[Vector3<f64>]) -> DMatrix<f64> {
            design_matrix(features, &self.nodes, self.delta) * &self.weights
        }
    }
}

/// Settings of the regression scheme.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionParams {
    /// Number of RBF nodes `L`.
    pub n_nodes: usize,
    /// Fixed bandwidth `δ`; the median heuristic when absent.
    pub bandwidth: Option<f64>,
    /// Fixed ridge weight; `1e-8·‖A‖_F²/L` when absent.
    pub ridge: Option<f64>,
    /// Seed for node selection.
    pub seed: u64,
}

impl Default for RegressionParams {
    fn default() -> Self {
        Self {
            n_nodes: 64,
            bandwidth: None,
            ridge: None,
            seed: 7,
        }
    }
}

/// Least-squares Monte Carlo version of the backward scheme: the costate is
/// regressed on the current state at every step instead of being carried
/// along each path.
///
/// ```text
/// Z_m = E[Y_{m+1} ΔW_mᵀ | X_m] / dt
/// (I - dt·B_mᵀ) Y_m = E[Y_{m+1} | X_m] + dt·(d_m e₁ + κ_{m+1} e₃ + <σ_x, Z_m> + σ_μ-term)
/// ```
pub fn solve_regression(
    p: &ModelParams,
    traj: &TrajectoryBundle,
    spec: &CostSpec,
    params: &RegressionParams,
    convention: MeanFieldConvention,
) -> Result<AdjointBundle> {
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    spec.check_grid(&traj.grid)?;
    if params.n_nodes == 0 {
        return Err(Error::InvalidParameter("need at least one RBF node".into()));
    }
    let n_steps = traj.grid.n_steps;
    let dt = traj.grid.dt;
    let n = traj.n_particles();
    let channels = traj.noise().channels();
    let l = params.n_nodes.min(n);
    let drive = tracking_drive(traj, spec);
    let full = p.noise_mode == NoiseMode::Full;

    let mut y = vec![Vec::new(); n_steps + 1];
    y[n_steps] = vec![Vector3::<f64>::zeros(); n];
    let mut z = vec![Vec::new(); n_steps];

    for m in (0..n_steps).rev() {
        let next = &y[m + 1];
        let features: Vec<Vector3<f64>> = traj.states[m].iter().map(|x| x.to_vector()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(m as u64);
        let nodes: Vec<Vector3<f64>> = rand::seq::index::sample(&mut rng, n, l)
            .into_iter()
            .map(|i| features[i])
            .collect();
        let delta = params.bandwidth.unwrap_or_else(|| rbf::median_bandwidth(&nodes));

        let n_out = 3 + 3 * channels;
        let mut targets = DMatrix::zeros(n, n_out);
        for i in 0..n {
            let dw = traj.noise().increment(m, i);
            for a in 0..3 {
                targets[(i, a)] = next[i][a];
                for (ch, d) in dw.iter().enumerate() {
                    targets[(i, 3 + a * channels + ch)] = next[i][a] * d / dt;
                }
            }
        }
        let a = rbf::design_matrix(&features, &nodes, delta);
        let lambda = params.ridge.unwrap_or_else(|| rbf::default_ridge(&a));
        let fitted = &a * rbf::fit_design(&a, &targets, lambda)?;

        let zm: Vec<Matrix3<f64>> = (0..n)
            .map(|i| {
                let mut q = Matrix3::zeros();
                for a in 0..3 {
                    for ch in 0..channels {
                        q[(a, ch)] = fitted[(i, 3 + a * channels + ch)];
                    }
                }
                q
            })
            .collect();

        let kappa = if p.j != 0.0 {
            coupling_terms(p, &traj.states[m + 1], next, convention)
        } else {
            vec![0.0; n]
        };
        let summary = &traj.summaries[m];
        let sigma_mu = if full && p.sigma_j != 0.0 {
            zm.iter()
                .zip(&traj.states[m])
                .map(|(q, x)| -p.sigma_j * (x.v - p.v_rev) * q[(0, 1)])
                .sum::<f64>()
                / n as f64
        } else {
            0.0
        };
        let ybar = traj.summaries[m.saturating_sub(1)].mean_y;
        let mut current = Vec::with_capacity(n);
        for i in 0..n {
            let x = &traj.states[m][i];
            let mut rhs = Vector3::new(fitted[(i, 0)], fitted[(i, 1)], fitted[(i, 2)]);
            rhs[0] += dt * drive[m];
            rhs[2] += dt * (kappa[i] + sigma_mu);
            if full {
                let (d12, d33v, d33y) = p.diffusion_state_partials(x, summary)?;
                let q = &zm[i];
                rhs[0] += dt * (d12 * q[(0, 1)] + d33v * q[(2, 2)]);
                rhs[2] += dt * d33y * q[(2, 2)];
            }
            let step = Matrix3::identity() - dt * p.drift_jac_mean_y(x, ybar).transpose();
            let yi = step
                .try_inverse()
                .ok_or(Error::SingularStep { particle: i, step: m })?
                * rhs;
            current.push(yi);
        }
        y[m] = current;
        z[m] = zm;
    }

    Ok(AdjointBundle {
        mode: AdjointMode::RbfRegression,
        dt,
        p: y,
        q: Some(z),
    })
}

/// Relative `ℓ²`-in-time distance between ensemble-mean first costates.
pub fn mean_p1_relative_error(a: &AdjointBundle, reference: &AdjointBundle) -> f64 {
    let ma = a.mean_p();
    let mr = reference.mean_p();
    let num: f64 = ma.iter().zip(&mr).map(|(x, y)| (x[0] - y[0]).powi(2)).sum();
    let den: f64 = mr.iter().map(|y| y[0] * y[0]).sum();
    (num / den).sqrt()
}
