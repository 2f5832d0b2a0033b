//! Closed-form solutions for the commuting single-channel class with
//! isotropic driving noise (S = 0): the linear trajectory for a fixed field
//! and the pure-dephasing density matrix. These are the ground truth the
//! Monte Carlo estimators are tested against.
//!
//! For a diagonal coupling with eigenvalues a_j the linear solution is
//!
//!   ψ_j(t) = exp(-i a_j X(t) - a_j² Θ(t)) ψ0_j,
//!   X(t) = ∫₀ᵗ ξ(s) ds,   Θ(t) = ∫₀ᵗ∫₀ᵗ θ(τ-s) D(τ,s) dτ ds,
//!
//! and the density matrix dephases as ρ_jk(t) = ρ_jk(0) e^{-(a_j-a_k)² Λ(t)/2}
//! with Λ(t) = ∫₀ᵗ∫₀ᵗ D. All quadrature is trapezoidal on the grid with the
//! equal-time convention θ(0) = 1/2, matching the kernel discretization, so
//! comparisons against the integrator isolate Monte Carlo error.

use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fields::FieldRealization;
use crate::grid::TimeGrid;
use crate::kernels::DiscretizedKernel;
use crate::linalg;

type ScalarKernel = dyn Fn(f64, f64) -> Complex64 + Send + Sync;

/// A single Hermitian coupling commuting with H₀, described by its
/// eigenvalues, plus the scalar bath kernel.
pub struct CommutingModel {
    couplings: Array1<f64>,
    psi0: Array1<Complex64>,
    kernel: Box<ScalarKernel>,
}

impl CommutingModel {
    pub fn new(
        couplings: Array1<f64>,
        psi0: Array1<Complex64>,
        kernel: impl Fn(f64, f64) -> Complex64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if couplings.len() != psi0.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} state components", couplings.len()),
                got: format!("{}", psi0.len()),
            });
        }
        if couplings.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidSystem("non-finite coupling eigenvalue".into()));
        }
        let norm = psi0.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidSystem(format!(
                "initial state has norm {norm}, expected 1"
            )));
        }
        Ok(Self {
            couplings,
            psi0,
            kernel: Box::new(kernel),
        })
    }

    /// The worked example: couplings with the stationary kernel e^{-rate|τ-s|}.
    pub fn exponential(couplings: Array1<f64>, psi0: Array1<Complex64>, rate: f64) -> Result<Self> {
        Self::new(couplings, psi0, move |tau, s| {
            Complex64::new((-rate * (tau - s).abs()).exp(), 0.0)
        })
    }

    pub fn dim(&self) -> usize {
        self.couplings.len()
    }

    pub fn couplings(&self) -> &Array1<f64> {
        &self.couplings
    }

    pub fn psi0(&self) -> &Array1<Complex64> {
        &self.psi0
    }

    pub fn kernel(&self, tau: f64, s: f64) -> Complex64 {
        (self.kernel)(tau, s)
    }
}

/// Model bound to a grid, with the quadrature integrals Θ and Λ precomputed
/// at every node.
pub struct CommutingOracle {
    couplings: Array1<f64>,
    psi0: Array1<Complex64>,
    grid: TimeGrid,
    kernel_matrix: Array2<Complex64>,
    theta: Vec<Complex64>,
    lambda: Vec<Complex64>,
}

impl CommutingOracle {
    pub fn new(model: &CommutingModel, grid: &TimeGrid) -> Self {
        let m = grid.len();
        let kernel_matrix = Array2::from_shape_fn((m, m), |(a, b)| {
            model.kernel(grid.node(a), grid.node(b))
        });
        Self::from_kernel_matrix(
            model.couplings.clone(),
            model.psi0.clone(),
            grid,
            kernel_matrix,
        )
    }

    /// Build from an already-discretized scalar kernel (single channel).
    pub fn from_discretized(
        couplings: Array1<f64>,
        psi0: Array1<Complex64>,
        kernel: &DiscretizedKernel,
        grid: &TimeGrid,
    ) -> Result<Self> {
        if kernel.channels() != 1 {
            return Err(Error::Precondition(
                "the commuting oracle is single-channel".into(),
            ));
        }
        if kernel.nodes() != grid.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} nodes", grid.len()),
                got: format!("{}", kernel.nodes()),
            });
        }
        Ok(Self::from_kernel_matrix(
            couplings,
            psi0,
            grid,
            kernel.values().clone(),
        ))
    }

    fn from_kernel_matrix(
        couplings: Array1<f64>,
        psi0: Array1<Complex64>,
        grid: &TimeGrid,
        kernel_matrix: Array2<Complex64>,
    ) -> Self {
        let m = grid.len();
        let mut theta = vec![Complex64::ZERO; m];
        let mut lambda = vec![Complex64::ZERO; m];
        for v in 1..m {
            let w = grid.trapezoid_weights(v);
            let mut th = Complex64::ZERO;
            let mut la = Complex64::ZERO;
            for a in 0..=v {
                for b in 0..=v {
                    let contrib = w[a] * w[b] * kernel_matrix[(a, b)];
                    la += contrib;
                    th += match a.cmp(&b) {
                        std::cmp::Ordering::Greater => contrib,
                        std::cmp::Ordering::Equal => 0.5 * contrib,
                        std::cmp::Ordering::Less => Complex64::ZERO,
                    };
                }
            }
            theta[v] = th;
            lambda[v] = la;
        }
        Self {
            couplings,
            psi0,
            grid: *grid,
            kernel_matrix,
            theta,
            lambda,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Θ(t_v) = ∫∫ θ(τ-s) D over [0,t_v]², trapezoidal with θ(0) = 1/2.
    pub fn theta(&self, node: usize) -> Complex64 {
        self.theta[node]
    }

    /// Λ(t_v) = ∫∫ D over [0,t_v]².
    pub fn lambda(&self, node: usize) -> Complex64 {
        self.lambda[node]
    }

    /// X(t_v) = ∫₀^{t_v} ξ by the trapezoidal rule.
    pub fn integrated_field(&self, xi: &FieldRealization, node: usize) -> Result<Complex64> {
        if xi.channels() != 1 {
            return Err(Error::Precondition(
                "the commuting oracle is single-channel".into(),
            ));
        }
        if xi.nodes() < node + 1 {
            return Err(Error::ShapeMismatch {
                expected: format!("≥{} nodes", node + 1),
                got: format!("{}", xi.nodes()),
            });
        }
        let w = self.grid.trapezoid_weights(node);
        Ok((0..=node).map(|m| w[m] * xi.value(0, m)).sum())
    }

    /// Exact linear (unnormalized) state at a node for a fixed field.
    pub fn linear_state(&self, xi: &FieldRealization, node: usize) -> Result<Array1<Complex64>> {
        let x = self.integrated_field(xi, node)?;
        let theta = self.theta[node];
        Ok(Array1::from_shape_fn(self.couplings.len(), |j| {
            let a = self.couplings[j];
            (Complex64::new(0.0, -a) * x - a * a * theta).exp() * self.psi0[j]
        }))
    }

    /// Exact linear trajectory at every node.
    pub fn linear_trajectory(&self, xi: &FieldRealization) -> Result<crate::linear::StateTrajectory> {
        let m = self.grid.len();
        let d = self.couplings.len();
        let mut states = Array2::<Complex64>::zeros((m, d));
        for node in 0..m {
            states.row_mut(node).assign(&self.linear_state(xi, node)?);
        }
        Ok(crate::linear::StateTrajectory {
            grid: self.grid,
            states,
        })
    }

    /// Exact dephasing density matrix ρ_jk(t) = ρ_jk(0) e^{-(a_j-a_k)² Λ(t)/2}.
    /// Requires a real symmetric kernel.
    pub fn dephasing_density(&self, node: usize) -> Result<Array2<Complex64>> {
        let sym = linalg::symmetric_residual(&self.kernel_matrix);
        let max_im = self
            .kernel_matrix
            .iter()
            .fold(0.0f64, |acc, z| acc.max(z.im.abs()));
        let scale = linalg::max_abs(&self.kernel_matrix).max(1e-300);
        if sym > 1e-10 || max_im / scale > 1e-10 {
            return Err(Error::KernelNotSymmetric {
                residual: sym.max(max_im / scale),
            });
        }
        let lambda = self.lambda[node].re;
        let d = self.couplings.len();
        Ok(Array2::from_shape_fn((d, d), |(j, k)| {
            let gap = self.couplings[j] - self.couplings[k];
            self.psi0[j] * self.psi0[k].conj() * (-0.5 * gap * gap * lambda).exp()
        }))
    }
}

/// Exact linear state for a fixed field (single call convenience).
pub fn exact_linear_state(
    model: &CommutingModel,
    xi: &FieldRealization,
    grid: &TimeGrid,
    node: usize,
) -> Result<Array1<Complex64>> {
    CommutingOracle::new(model, grid).linear_state(xi, node)
}

/// Exact dephasing density matrix at a node (single call convenience).
pub fn exact_dephasing_density(
    model: &CommutingModel,
    grid: &TimeGrid,
    node: usize,
) -> Result<Array2<Complex64>> {
    CommutingOracle::new(model, grid).dephasing_density(node)
}
