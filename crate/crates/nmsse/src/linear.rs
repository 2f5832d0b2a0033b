//! Time-local propagation for fixed field realizations, the auxiliary-noise
//! average that reconstructs linear stochastic trajectories, and the
//! two-batch density-matrix estimator.
//!
//! The driven equation is `dψ/dt = -i Σ_k A^k(t) [ξ_k(t) + η_k(t)] ψ`; its
//! η-average at fixed ξ is the linear trajectory ψ_ξ(t), and the open-system
//! state is recovered as E_ξ[E_η ψ · (E_η ψ)†] with two independent η batches.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{build_sampler, FieldRealization, FieldSampler};
use crate::grid::TimeGrid;
use crate::kernels::{GammaKernel, KernelSet};
use crate::linalg;
use crate::rng::{domain, mix};
use crate::system::SystemSpec;

/// Component magnitude beyond which propagation aborts with
/// [`Error::SchemeOverflow`].
pub const OVERFLOW_GUARD: f64 = 1e30;

/// Chunk width for deterministic parallel reductions: partial sums are
/// accumulated per fixed chunk and merged in index order, so results do not
/// depend on the worker count.
const REDUCTION_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    /// First-order explicit step on nodal field values.
    Euler,
    /// Exponential midpoint step: exact for commuting generators, exactly
    /// unitary for real drives, second order in general. Field midpoints are
    /// nodal averages.
    #[default]
    ExpMidpoint,
}

/// A pure-state trajectory on the grid; row `m` is ψ(t_m).
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    pub grid: TimeGrid,
    pub states: Array2<Complex64>,
}

impl StateTrajectory {
    pub fn state(&self, node: usize) -> Array1<Complex64> {
        self.states.row(node).to_owned()
    }
}

/// Monte Carlo mean of a trajectory with per-node, per-component standard
/// errors. `stderr` combines the real and imaginary scatter as a modulus;
/// the split parts are kept for coverage diagnostics.
#[derive(Debug, Clone)]
pub struct TrajectoryEstimate {
    pub grid: TimeGrid,
    pub mean: Array2<Complex64>,
    pub stderr: Array2<f64>,
    pub stderr_re: Array2<f64>,
    pub stderr_im: Array2<f64>,
    pub samples: usize,
}

/// Two-batch density-matrix estimate at one node.
#[derive(Debug, Clone)]
pub struct DensityEstimate {
    /// Hermitized estimate (ρ̂ + ρ̂†)/2.
    pub rho: Array2<Complex64>,
    /// Per-entry standard error over the ξ ensemble.
    pub stderr_entries: Array2<f64>,
    /// Largest entrywise standard error.
    pub stderr: f64,
    /// Largest entry of the discarded anti-Hermitian part.
    pub herm_residual: f64,
    pub xi_samples: usize,
    pub eta_samples: usize,
}

enum Generator {
    /// H₀ and all couplings diagonal: the step is a phase per component.
    /// `a[(k, j)]` is the j-th diagonal entry of Â^k.
    Diagonal { a: Array2<f64> },
    /// Interaction-picture operators precomputed per step.
    Dense { ops: Vec<Vec<Array2<Complex64>>> },
}

/// Precomputed stepper for one (system, grid, scheme) triple; propagating
/// many field realizations reuses the operator tables.
pub struct Propagator<'a> {
    sys: &'a SystemSpec,
    grid: TimeGrid,
    scheme: Scheme,
    gen: Generator,
}

impl<'a> Propagator<'a> {
    pub fn new(sys: &'a SystemSpec, grid: &TimeGrid, scheme: Scheme) -> Self {
        let gen = if sys.is_diagonal() {
            let n = sys.channels();
            let d = sys.dim();
            let mut a = Array2::<f64>::zeros((n, d));
            for (k, op) in sys.coupling().iter().enumerate() {
                for j in 0..d {
                    a[(k, j)] = op[(j, j)].re;
                }
            }
            Generator::Diagonal { a }
        } else {
            let steps = grid.len() - 1;
            let ops = (0..steps)
                .map(|m| {
                    let t = match scheme {
                        Scheme::Euler => grid.node(m),
                        Scheme::ExpMidpoint => grid.node(m) + 0.5 * grid.dt(),
                    };
                    sys.ops_at(t)
                })
                .collect();
            Generator::Dense { ops }
        };
        Self {
            sys,
            grid: *grid,
            scheme,
            gen,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn system(&self) -> &SystemSpec {
        self.sys
    }

    fn check_fields(&self, xi: &FieldRealization, eta: &FieldRealization, upto: usize) -> Result<()> {
        let n = self.sys.channels();
        for (name, f) in [("xi", xi), ("eta", eta)] {
            if f.channels() != n || f.nodes() < upto + 1 {
                return Err(Error::ShapeMismatch {
                    expected: format!("{n} channels x ≥{} nodes for {name}", upto + 1),
                    got: format!("{} x {}", f.channels(), f.nodes()),
                });
            }
        }
        Ok(())
    }

    /// Core stepping loop over a total drive `c_k(t_m)` given as a closure:
    /// nodal values for Euler, two-node averages for the midpoint scheme.
    fn evolve_drive(
        &self,
        drive: &impl Fn(usize, usize) -> Complex64,
        upto: usize,
        mut sink: impl FnMut(usize, &Array1<Complex64>),
    ) -> Result<()> {
        let d = self.sys.dim();
        let n = self.sys.channels();
        let dt = self.grid.dt();
        let step_drive = |k: usize, m: usize| match self.scheme {
            Scheme::Euler => drive(k, m),
            Scheme::ExpMidpoint => 0.5 * (drive(k, m) + drive(k, m + 1)),
        };
        let mut psi = self.sys.psi0().clone();
        sink(0, &psi);
        let mut drives = vec![Complex64::ZERO; n];

        for m in 0..upto {
            for (k, slot) in drives.iter_mut().enumerate() {
                *slot = step_drive(k, m);
            }
            match &self.gen {
                Generator::Diagonal { a } => {
                    for j in 0..d {
                        let mut g = Complex64::ZERO;
                        for (k, &c) in drives.iter().enumerate() {
                            g += c * a[(k, j)];
                        }
                        // generator entry is -i·dt·g
                        let step = Complex64::new(0.0, -dt) * g;
                        psi[j] *= match self.scheme {
                            Scheme::Euler => Complex64::new(1.0, 0.0) + step,
                            Scheme::ExpMidpoint => step.exp(),
                        };
                    }
                }
                Generator::Dense { ops } => {
                    let mut g = Array2::<Complex64>::zeros((d, d));
                    for (k, op) in ops[m].iter().enumerate() {
                        let weight = Complex64::new(0.0, -dt) * drives[k];
                        g.zip_mut_with(op, |gz, az| *gz += weight * az);
                    }
                    psi = match self.scheme {
                        Scheme::Euler => &psi + &g.dot(&psi),
                        Scheme::ExpMidpoint => linalg::expm(&g).dot(&psi),
                    };
                }
            }
            if psi.iter().any(|z| z.norm_sqr() > OVERFLOW_GUARD * OVERFLOW_GUARD) {
                return Err(Error::SchemeOverflow { node: m + 1 });
            }
            sink(m + 1, &psi);
        }
        Ok(())
    }

    fn evolve(
        &self,
        xi: &FieldRealization,
        eta: &FieldRealization,
        upto: usize,
        sink: impl FnMut(usize, &Array1<Complex64>),
    ) -> Result<()> {
        self.check_fields(xi, eta, upto)?;
        self.evolve_drive(&|k, m| xi.value(k, m) + eta.value(k, m), upto, sink)
    }

    /// State at `node` under a caller-supplied total drive. The closure must
    /// be defined for every node `m ≤ node`.
    pub fn endpoint_with(
        &self,
        drive: &impl Fn(usize, usize) -> Complex64,
        node: usize,
    ) -> Result<Array1<Complex64>> {
        let mut out = Array1::<Complex64>::zeros(self.sys.dim());
        self.evolve_drive(drive, node, |at, psi| {
            if at == node {
                out.assign(psi);
            }
        })?;
        Ok(out)
    }

    /// Full trajectory over the grid. No normalization is applied.
    pub fn propagate(&self, xi: &FieldRealization, eta: &FieldRealization) -> Result<StateTrajectory> {
        let m = self.grid.len();
        let d = self.sys.dim();
        let mut states = Array2::<Complex64>::zeros((m, d));
        self.evolve(xi, eta, m - 1, |node, psi| {
            states.row_mut(node).assign(psi);
        })?;
        Ok(StateTrajectory {
            grid: self.grid,
            states,
        })
    }

    /// State at `node` only.
    pub fn endpoint(
        &self,
        xi: &FieldRealization,
        eta: &FieldRealization,
        node: usize,
    ) -> Result<Array1<Complex64>> {
        let mut out = Array1::<Complex64>::zeros(self.sys.dim());
        self.evolve(xi, eta, node, |at, psi| {
            if at == node {
                out.assign(psi);
            }
        })?;
        Ok(out)
    }
}

/// Integrate the time-local equation for one (ξ, η) pair.
pub fn propagate_time_local(
    sys: &SystemSpec,
    xi: &FieldRealization,
    eta: &FieldRealization,
    grid: &TimeGrid,
    scheme: Scheme,
) -> Result<StateTrajectory> {
    Propagator::new(sys, grid, scheme).propagate(xi, eta)
}

struct TrajectoryAccumulator {
    sum: Array2<Complex64>,
    sum_re2: Array2<f64>,
    sum_im2: Array2<f64>,
    count: usize,
}

impl TrajectoryAccumulator {
    fn new(nodes: usize, dim: usize) -> Self {
        Self {
            sum: Array2::zeros((nodes, dim)),
            sum_re2: Array2::zeros((nodes, dim)),
            sum_im2: Array2::zeros((nodes, dim)),
            count: 0,
        }
    }

    fn add(&mut self, states: &Array2<Complex64>) {
        self.sum += states;
        self.sum_re2.zip_mut_with(states, |acc, z| *acc += z.re * z.re);
        self.sum_im2.zip_mut_with(states, |acc, z| *acc += z.im * z.im);
        self.count += 1;
    }

    fn merge(&mut self, other: Self) {
        self.sum += &other.sum;
        self.sum_re2 += &other.sum_re2;
        self.sum_im2 += &other.sum_im2;
        self.count += other.count;
    }

    fn finish(self, grid: TimeGrid) -> TrajectoryEstimate {
        let n = self.count as f64;
        let mean = self.sum.mapv(|z| z / n);
        let variance = |sumsq: &Array2<f64>, part: &dyn Fn(&Complex64) -> f64| {
            Array2::from_shape_fn(sumsq.dim(), |idx| {
                let mu = part(&mean[idx]);
                crate::stats::stderr_of_mean(sumsq[idx] / n, mu * mu, n)
            })
        };
        let stderr_re = variance(&self.sum_re2, &|z| z.re);
        let stderr_im = variance(&self.sum_im2, &|z| z.im);
        let stderr = Array2::from_shape_fn(stderr_re.dim(), |idx| {
            (stderr_re[idx] * stderr_re[idx] + stderr_im[idx] * stderr_im[idx]).sqrt()
        });
        TrajectoryEstimate {
            grid,
            mean,
            stderr,
            stderr_re,
            stderr_im,
            samples: self.count,
        }
    }
}

fn chunk_ranges(total: usize) -> Vec<(usize, usize)> {
    (0..total)
        .step_by(REDUCTION_CHUNK)
        .map(|start| (start, REDUCTION_CHUNK.min(total - start)))
        .collect()
}

/// Average the time-local trajectories over `n_eta` auxiliary-field draws at
/// fixed ξ, estimating the linear trajectory ψ_ξ(t) at every node.
pub fn unravel_linear(
    sys: &SystemSpec,
    grid: &TimeGrid,
    xi: &FieldRealization,
    gamma: &GammaKernel,
    n_eta: usize,
    seed: u64,
    scheme: Scheme,
) -> Result<TrajectoryEstimate> {
    let sampler = build_sampler(gamma.free(), gamma.auxiliary())?;
    let prop = Propagator::new(sys, grid, scheme);
    unravel_with_sampler(&prop, xi, &sampler, n_eta, seed)
}

/// Same as [`unravel_linear`] with a prebuilt sampler and stepper.
pub fn unravel_with_sampler(
    prop: &Propagator<'_>,
    xi: &FieldRealization,
    eta_sampler: &FieldSampler,
    n_eta: usize,
    seed: u64,
) -> Result<TrajectoryEstimate> {
    if n_eta < 2 {
        return Err(Error::Precondition("unravel_linear needs n_eta ≥ 2".into()));
    }
    let fields = eta_sampler.sample(seed, n_eta);
    let nodes = prop.grid().len();
    let dim = prop.sys.dim();

    let partials: Vec<Result<TrajectoryAccumulator>> = chunk_ranges(n_eta)
        .par_iter()
        .map(|&(start, len)| {
            let mut acc = TrajectoryAccumulator::new(nodes, dim);
            for field in &fields[start..start + len] {
                let traj = prop.propagate(xi, field)?;
                acc.add(&traj.states);
            }
            Ok(acc)
        })
        .collect();

    let mut total = TrajectoryAccumulator::new(nodes, dim);
    for partial in partials {
        total.merge(partial?);
    }
    Ok(total.finish(*prop.grid()))
}

/// Reconstruct the reduced density matrix at one node from the two-batch
/// double average: ρ̂ = E_ξ[ u v† ] with u, v means over independent η
/// batches. Independent batches keep the η variance out of the estimator.
pub fn density_matrix(
    sys: &SystemSpec,
    kernels: &KernelSet,
    n_xi: usize,
    n_eta: usize,
    node: usize,
    seed: u64,
    scheme: Scheme,
) -> Result<DensityEstimate> {
    if n_xi < 2 || n_eta < 2 {
        return Err(Error::Precondition(
            "density_matrix needs n_xi ≥ 2 and n_eta ≥ 2".into(),
        ));
    }
    let grid = kernels.grid();
    if node >= grid.len() {
        return Err(Error::Precondition(format!(
            "node {node} outside grid of {} nodes",
            grid.len()
        )));
    }
    let xi_sampler = kernels.xi_sampler()?;
    let eta_sampler = kernels.eta_sampler()?;
    let prop = Propagator::new(sys, grid, scheme);
    let dim = sys.dim();

    let xi_fields = xi_sampler.sample(mix(seed, &[domain::XI]), n_xi);

    struct RhoAccumulator {
        sum: Array2<Complex64>,
        sum_re2: Array2<f64>,
        sum_im2: Array2<f64>,
        count: usize,
    }

    let batch_mean = |xi: &FieldRealization, batch_seed: u64| -> Result<Array1<Complex64>> {
        let fields = eta_sampler.sample(batch_seed, n_eta);
        let mut mean = Array1::<Complex64>::zeros(dim);
        for field in &fields {
            mean += &prop.endpoint(xi, field, node)?;
        }
        Ok(mean / n_eta as f64)
    };

    let partials: Vec<Result<RhoAccumulator>> = chunk_ranges(n_xi)
        .par_iter()
        .map(|&(start, len)| {
            let mut acc = RhoAccumulator {
                sum: Array2::zeros((dim, dim)),
                sum_re2: Array2::zeros((dim, dim)),
                sum_im2: Array2::zeros((dim, dim)),
                count: 0,
            };
            for (i, xi) in xi_fields.iter().enumerate().skip(start).take(len) {
                let u = batch_mean(xi, mix(seed, &[domain::ETA_FIRST, i as u64]))?;
                let v = batch_mean(xi, mix(seed, &[domain::ETA_SECOND, i as u64]))?;
                for r in 0..dim {
                    for c in 0..dim {
                        let p = u[r] * v[c].conj();
                        acc.sum[(r, c)] += p;
                        acc.sum_re2[(r, c)] += p.re * p.re;
                        acc.sum_im2[(r, c)] += p.im * p.im;
                    }
                }
                acc.count += 1;
            }
            Ok(acc)
        })
        .collect();

    let mut sum = Array2::<Complex64>::zeros((dim, dim));
    let mut sum_re2 = Array2::<f64>::zeros((dim, dim));
    let mut sum_im2 = Array2::<f64>::zeros((dim, dim));
    let mut count = 0usize;
    for partial in partials {
        let p = partial?;
        sum += &p.sum;
        sum_re2 += &p.sum_re2;
        sum_im2 += &p.sum_im2;
        count += p.count;
    }

    let n = count as f64;
    let raw = sum.mapv(|z| z / n);
    let mut herm_residual = 0.0f64;
    let mut rho = Array2::<Complex64>::zeros((dim, dim));
    for r in 0..dim {
        for c in 0..dim {
            let anti = 0.5 * (raw[(r, c)] - raw[(c, r)].conj());
            herm_residual = herm_residual.max(anti.norm());
            rho[(r, c)] = 0.5 * (raw[(r, c)] + raw[(c, r)].conj());
        }
    }
    let stderr_entries = Array2::from_shape_fn((dim, dim), |idx| {
        let mu = raw[idx];
        let se_re = crate::stats::stderr_of_mean(sum_re2[idx] / n, mu.re * mu.re, n);
        let se_im = crate::stats::stderr_of_mean(sum_im2[idx] / n, mu.im * mu.im, n);
        se_re.hypot(se_im)
    });
    let stderr = stderr_entries.iter().copied().fold(0.0f64, f64::max);

    Ok(DensityEstimate {
        rho,
        stderr_entries,
        stderr,
        herm_residual,
        xi_samples: count,
        eta_samples: n_eta,
    })
}
