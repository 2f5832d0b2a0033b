//! Simulation of non-Markovian stochastic Schrödinger equations.
//!
//! Linear trajectories driven by a colored complex Gaussian field ξ are
//! reconstructed as averages over an explicit *time-local* equation with one
//! extra Gaussian field η,
//!
//! ```text
//! dψ/dt = -i Σ_k A^k(t) [ξ_k(t) + η_k(t)] ψ,      ψ_ξ(t) = E_η[ψ_{ξ,η}(t)],
//! ```
//!
//! which turns a formal functional-derivative equation into an ordinary ODE
//! per noise draw. The auxiliary field's relation kernel K is fixed by the
//! bath kernels (D, S); its correlation kernel J is free up to positivity of
//! the stacked block kernel, certified here on the real (Re, Im) embedding.
//!
//! The crate provides:
//!
//! - [`kernels`]: kernel discretization, the auxiliary kernel K, J selection
//!   policies and PSD certificates;
//! - [`fields`]: correlated complex Gaussian sampling via eigen-factorized
//!   real embeddings, with empirical-correlation and characteristic-function
//!   validation;
//! - [`linear`]: time-local integration (exponential midpoint or Euler), the
//!   η-average, and the two-batch density-matrix estimator;
//! - [`oracle`]: closed forms for the commuting single-channel dephasing
//!   class, used as ground truth;
//! - [`nonlinear`]: norm-preserving trajectories for isotropic noise via the
//!   inductive field shift, plus cooked-measure reweighting;
//! - [`io`], [`stats`], [`validate`]: CSV formats, estimator statistics and
//!   the aggregated invariant suite.

pub mod error;
pub mod fields;
pub mod grid;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod linear;
pub mod nonlinear;
pub mod oracle;
pub mod rng;
pub mod stats;
pub mod system;
pub mod validate;

pub use error::{Error, Result};
pub use fields::{FieldRealization, FieldSampler};
pub use grid::TimeGrid;
pub use kernels::{
    build_k, check_psd, choose_j, discretize_kernel, kernel_from_coupling, DiscretizedKernel,
    GammaKernel, JPolicy, KernelSet, KernelSide, KernelSpec,
};
pub use linear::{
    density_matrix, propagate_time_local, unravel_linear, DensityEstimate, Propagator, Scheme,
    StateTrajectory, TrajectoryEstimate,
};
pub use nonlinear::{
    nonlinear_trajectory, normalize, reweighted_expectation, shift_field, InnerMode,
    LinearSolverMode, NonlinearSampler, ShiftedField, WeightedSample,
};
pub use oracle::{exact_dephasing_density, exact_linear_state, CommutingModel, CommutingOracle};
pub use system::SystemSpec;
