//! FitzHugh–Nagumo mean-field coefficients.
//!
//! The state of one neuron is `x = (v, w, y)`: membrane potential, recovery
//! variable and synaptic gating fraction. The network interacts only through
//! the barycenter `mean_y` of the gating variables. All coefficients are
//! autonomous, so no time argument is taken.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Additive noise on `v` only. One Brownian channel per neuron.
    #[default]
    ExternalOnly,
    /// External, coupling and gating noise. Three channels per neuron.
    Full,
}

/// Physical constants of the network. Defaults reproduce the experiment table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub sigma_ext: f64,
    pub v_rev: f64,
    pub a_r: f64,
    pub a_d: f64,
    pub t_max: f64,
    pub lambda: f64,
    pub v_t: f64,
    /// Mean maximal synaptic conductance.
    pub j: f64,
    pub sigma_j: f64,
    /// Gating-noise constants; `None` means "same as `a_r`" / "same as `a_d`".
    pub abar: Option<f64>,
    pub bbar: Option<f64>,
    /// Support margin of the gating cut-off, in (0, 0.5).
    pub cutoff_margin: f64,
    pub noise_mode: NoiseMode,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            a: 0.7,
            b: 0.8,
            c: 0.08,
            sigma_ext: 0.04,
            v_rev: 1.0,
            a_r: 1.0,
            a_d: 0.3,
            t_max: 1.0,
            lambda: 0.1,
            v_t: 2.0,
            j: 0.46,
            sigma_j: 0.0,
            abar: None,
            bbar: None,
            cutoff_margin: 0.05,
            noise_mode: NoiseMode::ExternalOnly,
        }
    }
}

/// State of a single neuron.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct NeuronState {
    pub v: f64,
    pub w: f64,
    pub y: f64,
}

impl NeuronState {
    pub const fn new(v: f64, w: f64, y: f64) -> Self {
        Self { v, w, y }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.v, self.w, self.y)
    }

    pub fn from_vector(x: &Vector3<f64>) -> Self {
        Self::new(x[0], x[1], x[2])
    }

    pub fn norm_squared(&self) -> f64 {
        self.v * self.v + self.w * self.w + self.y * self.y
    }

    /// Gating constraint `π(x) = y(y - 1)`; non-positive exactly on `0 <= y <= 1`.
    pub fn constraint(&self) -> f64 {
        self.y * (self.y - 1.0)
    }

    pub fn constraint_grad(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, 2.0 * self.y - 1.0)
    }

    pub fn constraint_hess() -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(0.0, 0.0, 2.0))
    }
}

/// Empirical first and second moments of an ensemble at one time.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct MeasureSummary {
    pub mean_v: f64,
    pub mean_w: f64,
    pub mean_y: f64,
    /// Mean of `|x|^2`.
    pub second_moment: f64,
}

impl MeasureSummary {
    /// Reduces in slice order so the result does not depend on scheduling.
    pub fn from_states(states: &[NeuronState]) -> Self {
        assert!(!states.is_empty(), "empty ensemble");
        let mut s = MeasureSummary::default();
        for x in states {
            s.mean_v += x.v;
            s.mean_w += x.w;
            s.mean_y += x.y;
            s.second_moment += x.norm_squared();
        }
        let n = states.len() as f64;
        s.mean_v /= n;
        s.mean_w /= n;
        s.mean_y /= n;
        s.second_moment /= n;
        s
    }

    /// Summary of a point mass, or any measure where only the barycenter matters.
    pub fn with_mean_y(mean_y: f64) -> Self {
        Self {
            mean_y,
            ..Self::default()
        }
    }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ModelParams {
    /// Parameters for the uncoupled network (`J = 0`).
    pub fn uncoupled(&self) -> Self {
        Self {
            j: 0.0,
            ..self.clone()
        }
    }

    /// Noise-free copy.
    pub fn deterministic(&self) -> Self {
        Self {
            sigma_ext: 0.0,
            sigma_j: 0.0,
            noise_mode: NoiseMode::ExternalOnly,
            ..self.clone()
        }
    }

    pub fn abar(&self) -> f64 {
        self.abar.unwrap_or(self.a_r)
    }

    pub fn bbar(&self) -> f64 {
        self.bbar.unwrap_or(self.a_d)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("a_r", self.a_r),
            ("a_d", self.a_d),
            ("t_max", self.t_max),
            ("lambda", self.lambda),
            ("c", self.c),
            ("abar", self.abar()),
            ("bbar", self.bbar()),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive, got {value}"
                )));
            }
        }
        let nonneg = [
            ("sigma_ext", self.sigma_ext),
            ("sigma_j", self.sigma_j),
            ("j", self.j),
            ("b", self.b),
        ];
        for (name, value) in nonneg {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be non-negative, got {value}"
                )));
            }
        }
        if !(self.cutoff_margin > 0.0 && self.cutoff_margin < 0.5) {
            return Err(Error::InvalidParameter(format!(
                "cutoff_margin must lie in (0, 0.5), got {}",
                self.cutoff_margin
            )));
        }
        Ok(())
    }

    /// Number of Brownian channels per neuron.
    pub fn noise_channels(&self) -> usize {
        match self.noise_mode {
            NoiseMode::ExternalOnly => 1,
            NoiseMode::Full => 3,
        }
    }

    /// Coupling-noise intensity actually in effect; zero in external-only mode.
    pub fn effective_sigma_j(&self) -> f64 {
        match self.noise_mode {
            NoiseMode::ExternalOnly => 0.0,
            NoiseMode::Full => self.sigma_j,
        }
    }

    /// Neurotransmitter concentration `S(v) = T_max / (1 + exp(-λ(v - V_T)))`.
    pub fn sigmoid(&self, v: f64) -> f64 {
        self.t_max * logistic(self.lambda * (v - self.v_t))
    }

    pub fn sigmoid_deriv(&self, v: f64) -> f64 {
        let s = logistic(self.lambda * (v - self.v_t));
        self.t_max * self.lambda * s * (1.0 - s)
    }

    /// Sup of `S'`, attained at `v = V_T`.
    pub fn sigmoid_deriv_max(&self) -> f64 {
        0.25 * self.t_max * self.lambda
    }

    fn cutoff_scaled(&self, y: f64) -> Option<f64> {
        let s = (y - 0.5) / (0.5 - self.cutoff_margin);
        (s.abs() < 1.0).then_some(s)
    }

    /// Smooth bump supported on `[δ₀, 1 - δ₀]` with peak value 1 at `y = 1/2`.
    pub fn cutoff_chi(&self, y: f64) -> f64 {
        match self.cutoff_scaled(y) {
            Some(s) => (1.0 - 1.0 / (1.0 - s * s)).exp(),
            None => 0.0,
        }
    }

    pub fn cutoff_chi_deriv(&self, y: f64) -> f64 {
        match self.cutoff_scaled(y) {
            Some(s) => {
                let q = 1.0 - s * s;
                let chi = (1.0 - 1.0 / q).exp();
                -2.0 * s / (q * q) * chi / (0.5 - self.cutoff_margin)
            }
            None => 0.0,
        }
    }

    /// Gating noise amplitude `χ(y) sqrt(ā S(v)(1-y) + b̄ y)`.
    pub fn gating_noise(&self, v: f64, y: f64) -> Result<f64> {
        let chi = self.cutoff_chi(y);
        if chi == 0.0 {
            return Ok(0.0);
        }
        let radicand = self.abar() * self.sigmoid(v) * (1.0 - y) + self.bbar() * y;
        if radicand < 0.0 {
            return Err(Error::NegativeRadicand { radicand, y });
        }
        Ok(chi * radicand.sqrt())
    }

    /// Gradient of the gating noise amplitude in `(v, y)`.
    pub fn gating_noise_grad(&self, v: f64, y: f64) -> Result<(f64, f64)> {
        let chi = self.cutoff_chi(y);
        if chi == 0.0 {
            return Ok((0.0, 0.0));
        }
        let s = self.sigmoid(v);
        let radicand = self.abar() * s * (1.0 - y) + self.bbar() * y;
        if radicand <= 0.0 {
            return Err(Error::NegativeRadicand { radicand, y });
        }
        let root = radicand.sqrt();
        let d_v = chi * self.abar() * self.sigmoid_deriv(v) * (1.0 - y) / (2.0 * root);
        let d_y = self.cutoff_chi_deriv(y) * root
            + chi * (self.bbar() - self.abar() * s) / (2.0 * root);
        Ok((d_v, d_y))
    }

    /// Drift `b(x, μ, α)`.
    pub fn drift(&self, x: &NeuronState, m: &MeasureSummary, alpha: f64) -> Vector3<f64> {
        self.drift_mean_y(x, m.mean_y, alpha)
    }

    #[inline]
    pub(crate) fn drift_mean_y(&self, x: &NeuronState, mean_y: f64, alpha: f64) -> Vector3<f64> {
        let NeuronState { v, w, y } = *x;
        Vector3::new(
            v - v * v * v / 3.0 - w + alpha - self.j * (v - self.v_rev) * mean_y,
            self.c * (v + self.a - self.b * w),
            self.a_r * self.sigmoid(v) * (1.0 - y) - self.a_d * y,
        )
    }

    /// Diffusion matrix. Column `k` multiplies Brownian channel `k`; in
    /// external-only mode only column 0 is populated.
    pub fn diffusion(
        &self,
        x: &NeuronState,
        m: &MeasureSummary,
        _alpha: f64,
    ) -> Result<Matrix3<f64>> {
        let mut sigma = Matrix3::zeros();
        sigma[(0, 0)] = self.sigma_ext;
        if self.noise_mode == NoiseMode::Full {
            sigma[(0, 1)] = -self.sigma_j * (x.v - self.v_rev) * m.mean_y;
            sigma[(2, 2)] = self.gating_noise(x.v, x.y)?;
        }
        Ok(sigma)
    }

    /// Jacobian of the drift with respect to the state.
    pub fn drift_jac_x(&self, x: &NeuronState, m: &MeasureSummary, _alpha: f64) -> Matrix3<f64> {
        self.drift_jac_mean_y(x, m.mean_y)
    }

    #[inline]
    pub(crate) fn drift_jac_mean_y(&self, x: &NeuronState, mean_y: f64) -> Matrix3<f64> {
        let NeuronState { v, y, .. } = *x;
        let s = self.sigmoid(v);
        Matrix3::new(
            1.0 - v * v - self.j * mean_y,
            -1.0,
            0.0,
            self.c,
            -self.c * self.b,
            0.0,
            self.a_r * self.sigmoid_deriv(v) * (1.0 - y),
            0.0,
            -self.a_r * s - self.a_d,
        )
    }

    /// Partial derivative of the drift with respect to the barycenter `mean_y`.
    #[inline]
    pub fn drift_deriv_mean_y(&self, x: &NeuronState) -> Vector3<f64> {
        Vector3::new(-self.j * (x.v - self.v_rev), 0.0, 0.0)
    }

    /// Lions derivative of the drift at `x`, evaluated at the copy variable.
    /// The drift depends on the measure only through `mean_y`, so the result
    /// does not depend on `_copy`.
    pub fn drift_lions_deriv(&self, x: &NeuronState, _copy: &NeuronState) -> Matrix3<f64> {
        let mut m = Matrix3::zeros();
        m[(0, 2)] = -self.j * (x.v - self.v_rev);
        m
    }

    /// Non-zero state partials of the diffusion in full mode:
    /// `(∂σ₁₂/∂v, ∂σ₃₃/∂v, ∂σ₃₃/∂y)`.
    pub fn diffusion_state_partials(
        &self,
        x: &NeuronState,
        m: &MeasureSummary,
    ) -> Result<(f64, f64, f64)> {
        if self.noise_mode == NoiseMode::ExternalOnly {
            return Ok((0.0, 0.0, 0.0));
        }
        let (gv, gy) = self.gating_noise_grad(x.v, x.y)?;
        Ok((-self.sigma_j * m.mean_y, gv, gy))
    }

    /// Root of the uncoupled nullcline equation for constant input `alpha`.
    pub fn uncoupled_rest_point(&self, alpha: f64) -> NeuronState {
        // w = (v + a)/b on the w-nullcline; b = 0 degenerates to v = -a.
        let v = if self.b == 0.0 {
            -self.a
        } else {
            let g = |v: f64| v - v * v * v / 3.0 - (v + self.a) / self.b + alpha;
            let (mut lo, mut hi) = (-10.0_f64, 10.0_f64);
            // g(-10) > 0 > g(10) for any reasonable parameters.
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if g(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let w = if self.b == 0.0 { 0.0 } else { (v + self.a) / self.b };
        let s = self.a_r * self.sigmoid(v);
        NeuronState::new(v, w, s / (s + self.a_d))
    }
}
