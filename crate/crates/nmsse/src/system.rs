//! System side of the model: the coupling operators Â^k, the proper
//! Hamiltonian H₀ and the initial state, with the interaction-picture
//! rotation A^k(t) = e^{iH₀t} A^k e^{-iH₀t}.

use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::linalg;

#[derive(Debug, Clone)]
pub struct SystemSpec {
    dim: usize,
    coupling: Vec<Array2<Complex64>>,
    hamiltonian: Array2<Complex64>,
    psi0: Array1<Complex64>,
}

impl SystemSpec {
    pub fn new(
        coupling: Vec<Array2<Complex64>>,
        hamiltonian: Array2<Complex64>,
        psi0: Array1<Complex64>,
    ) -> Result<Self> {
        if coupling.is_empty() {
            return Err(Error::InvalidSystem("at least one coupling operator".into()));
        }
        let dim = psi0.len();
        if dim == 0 {
            return Err(Error::InvalidSystem("empty initial state".into()));
        }
        for (k, a) in coupling.iter().enumerate() {
            if a.nrows() != dim || a.ncols() != dim {
                return Err(Error::InvalidSystem(format!(
                    "coupling operator {k} is {}x{}, state dimension is {dim}",
                    a.nrows(),
                    a.ncols()
                )));
            }
            let residual = linalg::hermitian_residual(a);
            if residual > 1e-12 {
                return Err(Error::InvalidSystem(format!(
                    "coupling operator {k} is not Hermitian (residual {residual:.3e})"
                )));
            }
        }
        if hamiltonian.nrows() != dim || hamiltonian.ncols() != dim {
            return Err(Error::InvalidSystem("Hamiltonian dimension mismatch".into()));
        }
        if linalg::hermitian_residual(&hamiltonian) > 1e-12 {
            return Err(Error::InvalidSystem("Hamiltonian is not Hermitian".into()));
        }
        let norm = psi0.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidSystem(format!(
                "initial state has norm {norm}, expected 1"
            )));
        }
        Ok(Self {
            dim,
            coupling,
            hamiltonian,
            psi0,
        })
    }

    /// Single diagonal coupling operator with trivial Hamiltonian.
    pub fn diagonal(a_diag: &[f64], psi0: Array1<Complex64>) -> Result<Self> {
        let dim = a_diag.len();
        let mut a = Array2::<Complex64>::zeros((dim, dim));
        for (j, &v) in a_diag.iter().enumerate() {
            a[(j, j)] = Complex64::new(v, 0.0);
        }
        Self::new(vec![a], Array2::zeros((dim, dim)), psi0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn channels(&self) -> usize {
        self.coupling.len()
    }

    pub fn coupling(&self) -> &[Array2<Complex64>] {
        &self.coupling
    }

    pub fn hamiltonian(&self) -> &Array2<Complex64> {
        &self.hamiltonian
    }

    pub fn psi0(&self) -> &Array1<Complex64> {
        &self.psi0
    }

    /// True when H₀ and every coupling operator are diagonal; the
    /// interaction picture is then trivial and the generator stays diagonal.
    pub fn is_diagonal(&self) -> bool {
        let diag = |a: &Array2<Complex64>| {
            a.indexed_iter()
                .all(|((i, j), z)| i == j || z.norm() == 0.0)
        };
        diag(&self.hamiltonian) && self.coupling.iter().all(diag)
    }

    /// Interaction-picture operators at time `t`.
    pub fn ops_at(&self, t: f64) -> Vec<Array2<Complex64>> {
        if self.is_diagonal() || linalg::max_abs(&self.hamiltonian) == 0.0 {
            return self.coupling.clone();
        }
        let phase_pos = linalg::expm(&self.hamiltonian.mapv(|z| z * Complex64::new(0.0, t)));
        let phase_neg = linalg::expm(&self.hamiltonian.mapv(|z| z * Complex64::new(0.0, -t)));
        self.coupling
            .iter()
            .map(|a| phase_pos.dot(a).dot(&phase_neg))
            .collect()
    }

    /// A^k(t_m) at every grid node.
    pub fn heisenberg_ops(&self, grid: &TimeGrid) -> Vec<Vec<Array2<Complex64>>> {
        grid.times().map(|t| self.ops_at(t)).collect()
    }
}
