//! Optimal control of stochastic FitzHugh–Nagumo networks.
//!
//! A network of `N` FitzHugh–Nagumo neurons coupled through their synaptic
//! gating variables is simulated as an interacting particle system. The
//! local field potential (ensemble mean of the membrane potential) is steered
//! towards a reference profile by a deterministic control current. Gradients
//! of the tracking cost come from a backward adjoint equation and drive a
//! projected gradient descent with step halving.
//!
//! Module map:
//!
//! * [`model`]: drift, diffusion, their derivatives, gating constraint.
//! * [`forward`]: drift-implicit particle scheme and trajectory diagnostics.
//! * [`adjoint`]: costate solvers (pathwise and RBF regression).
//! * [`control`]: cost, Hamiltonian, gradient, box projection.
//! * [`optimize`]: projected gradient descent.
//! * [`oracle`]: reference computations used to validate the above.
//! * [`experiment`]: configuration, reference profiles, experiment runner.
//!
//! With the default `parallel` feature, per-particle work runs on rayon.
//! Results never depend on the schedule: random numbers are keyed by
//! `(seed, particle, step)` and all ensemble reductions run in particle order.

pub mod adjoint;
pub mod control;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod forward;
pub mod io;
pub mod model;
pub mod noise;
pub mod optimize;
pub mod oracle;

pub use adjoint::{AdjointBundle, AdjointOptions, MeanFieldConvention, RegressionParams};
pub use control::{CostSpec, GradientGrid};
pub use error::{Error, Result};
pub use exec::Backend;
pub use forward::{ControlGrid, Ensemble, InitialLaw, TimeGrid, TrajectoryBundle};
pub use model::{MeasureSummary, ModelParams, NeuronState, NoiseMode};
pub use optimize::{OptimizerConfig, OptimizerState, SeedPolicy};
