//! Norm-preserving trajectories and cooked-measure estimators.
//!
//! For isotropic driving noise (S = 0) the normalized trajectory can be
//! sampled inductively: at node v the field is shifted over the whole grid,
//!
//!   ξ^[v+dv]_k(u) = ξ^[v]_k(u) + i D_{kℓ}(u, t_v) ⟨A^ℓ(t_v)⟩ dv,
//!
//! the linear equation is re-solved from 0 to v+dv with the shifted field and
//! the endpoint normalized. Each induction step costs one linear solve, so a
//! full trajectory adds a factor proportional to t/dt on top of a single
//! linear solve.
//!
//! Single-time statistics of normalized states need no induction at all:
//! averaging φ(ψ/‖ψ‖)·‖ψ‖² over plain linear solutions reweights the base
//! measure into the cooked one.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{FieldRealization, FieldSampler};

use crate::kernels::{DiscretizedKernel, KernelSet};
use crate::linalg;
use crate::linear::{Propagator, Scheme, StateTrajectory};
use crate::oracle::CommutingOracle;
use crate::rng::{domain, mix, rng_for};
use crate::system::SystemSpec;

/// Norm below which a state counts as numerically collapsed.
pub const ZERO_NORM_GUARD: f64 = 1e-30;

/// ψ / ‖ψ‖.
pub fn normalize(psi: &Array1<Complex64>) -> Result<Array1<Complex64>> {
    let norm = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if norm.is_nan() || norm <= ZERO_NORM_GUARD {
        return Err(Error::ZeroNormState);
    }
    Ok(psi.mapv(|z| z / norm))
}

/// A normalized state together with its cooked-measure weight ‖ψ‖².
#[derive(Debug, Clone)]
pub struct WeightedSample {
    pub state: Array1<Complex64>,
    pub weight: f64,
}

/// A field being shifted through the induction; `current` is ξ^[v] over the
/// full grid, `base` the original draw.
#[derive(Debug, Clone)]
pub struct ShiftedField {
    base: FieldRealization,
    current: FieldRealization,
    v_index: usize,
}

impl ShiftedField {
    pub fn new(base: FieldRealization) -> Self {
        let current = base.clone();
        Self {
            base,
            current,
            v_index: 0,
        }
    }

    pub fn base(&self) -> &FieldRealization {
        &self.base
    }

    pub fn current(&self) -> &FieldRealization {
        &self.current
    }

    pub fn v_index(&self) -> usize {
        self.v_index
    }
}

/// One induction update: add `i·D_{kℓ}(u, t_v)·⟨A^ℓ⟩·dv` at every grid node u
/// and advance the induction index.
pub fn shift_field(
    sf: &mut ShiftedField,
    exp_a: &[f64],
    d: &DiscretizedKernel,
    dv: f64,
) -> Result<()> {
    let n = d.channels();
    let m = d.nodes();
    if sf.current.channels() != n || sf.current.nodes() != m {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} channels x {m} nodes"),
            got: format!("{} x {}", sf.current.channels(), sf.current.nodes()),
        });
    }
    if exp_a.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} expectations"),
            got: format!("{}", exp_a.len()),
        });
    }
    if sf.v_index + 1 >= m {
        return Err(Error::Precondition(
            "shift_field past the end of the grid".into(),
        ));
    }
    let v = sf.v_index;
    for k in 0..n {
        for u in 0..m {
            let mut coupling = Complex64::ZERO;
            for (ell, &a) in exp_a.iter().enumerate() {
                coupling += d.entry(k, u, ell, v) * a;
            }
            sf.current.values_mut()[(k, u)] += Complex64::new(0.0, dv) * coupling;
        }
    }
    sf.v_index += 1;
    Ok(())
}

/// Inner solver of the induction: exact (commuting class only) or a fresh
/// auxiliary-noise average per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerMode {
    Oracle,
    Mc { n_eta: usize },
}

/// How the per-step auxiliary fields are drawn for the Mc inner solver.
enum InnerEta {
    /// Time-major Cholesky factor of the real covariance K; leading blocks
    /// factor the leading sub-kernels, so a prefix of the field costs only a
    /// prefix of the triangular matrix.
    Prefix { chol: Array2<f64>, channels: usize },
    /// Generic eigen-factorized sampler drawing full-grid fields.
    Full { sampler: FieldSampler },
}

/// Result of one norm-preserving trajectory.
#[derive(Debug, Clone)]
pub struct NonlinearTrajectory {
    pub trajectory: StateTrajectory,
    /// Largest imaginary residue seen in ⟨A^ℓ(v)⟩ before taking the real part.
    pub max_im_expectation: f64,
    /// Standard error of the final inner average, before normalization
    /// (Mc inner only).
    pub endpoint_stderr: Option<Array1<f64>>,
    /// Norm of the final inner average, before normalization (Mc inner only).
    pub endpoint_raw_norm: Option<f64>,
}

/// Prebuilt machinery for sampling norm-preserving trajectories; building it
/// once amortizes the oracle quadrature or the Cholesky factor across draws.
pub struct NonlinearSampler<'a> {
    sys: &'a SystemSpec,
    kernels: &'a KernelSet,
    scheme: Scheme,
    mode: InnerMode,
    prop: Propagator<'a>,
    oracle: Option<CommutingOracle>,
    inner_eta: Option<InnerEta>,
    node_ops: Option<Vec<Vec<Array2<Complex64>>>>,
}

impl<'a> NonlinearSampler<'a> {
    pub fn new(
        sys: &'a SystemSpec,
        kernels: &'a KernelSet,
        mode: InnerMode,
        scheme: Scheme,
    ) -> Result<Self> {
        let d_kernel = kernels.correlation();
        let scale = linalg::max_abs(d_kernel.values()).max(1.0);
        let s_scale = linalg::max_abs(kernels.relation().values());
        if s_scale > 1e-12 * scale {
            return Err(Error::Precondition(
                "the norm-preserving induction requires S = 0".into(),
            ));
        }
        let max_im = d_kernel
            .values()
            .iter()
            .fold(0.0f64, |acc, z| acc.max(z.im.abs()));
        if max_im > 1e-10 * scale || linalg::symmetric_residual(d_kernel.values()) > 1e-10 {
            return Err(Error::Precondition(
                "the field-shift update is only valid for real symmetric D".into(),
            ));
        }
        if sys.channels() != d_kernel.channels() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} channels", d_kernel.channels()),
                got: format!("{}", sys.channels()),
            });
        }

        let prop = Propagator::new(sys, kernels.grid(), scheme);
        let oracle = match mode {
            InnerMode::Oracle => {
                if !(sys.is_diagonal() && sys.channels() == 1) {
                    return Err(Error::Precondition(
                        "the oracle inner solver needs a single diagonal coupling".into(),
                    ));
                }
                let diag: Array1<f64> =
                    Array1::from_iter((0..sys.dim()).map(|j| sys.coupling()[0][(j, j)].re));
                Some(CommutingOracle::from_discretized(
                    diag,
                    sys.psi0().clone(),
                    d_kernel,
                    kernels.grid(),
                )?)
            }
            InnerMode::Mc { n_eta } => {
                if n_eta < 2 {
                    return Err(Error::Precondition("Mc inner solver needs n_eta ≥ 2".into()));
                }
                None
            }
        };
        let inner_eta = match mode {
            InnerMode::Mc { .. } => Some(Self::build_inner_eta(kernels)?),
            InnerMode::Oracle => None,
        };
        let node_ops = if sys.is_diagonal() {
            None
        } else {
            Some(kernels.grid().times().map(|t| sys.ops_at(t)).collect())
        };
        Ok(Self {
            sys,
            kernels,
            scheme,
            mode,
            prop,
            oracle,
            inner_eta,
            node_ops,
        })
    }

    /// In the S = 0 real-D regime the real auxiliary field with covariance
    /// K (the J = K choice) is always admissible, and the inner average is
    /// the same for every admissible J, so the induction samples that field
    /// regardless of the configured free kernel. A time-major Cholesky makes
    /// node prefixes cheap; when K is only semi-definite the generic
    /// eigen-factorized sampler takes over with full-grid draws.
    fn build_inner_eta(kernels: &KernelSet) -> Result<InnerEta> {
        let k = kernels.gamma().auxiliary();
        let n = k.channels();
        let m = k.nodes();
        let dim = n * m;
        let mut time_major = Array2::<f64>::zeros((dim, dim));
        for a in 0..m {
            for i in 0..n {
                for b in 0..m {
                    for j in 0..n {
                        time_major[(a * n + i, b * n + j)] = k.entry(i, a, j, b).re;
                    }
                }
            }
        }
        if let Some(chol) = linalg::cholesky(&time_major) {
            return Ok(InnerEta::Prefix { chol, channels: n });
        }
        let sampler = kernels.eta_sampler()?;
        Ok(InnerEta::Full { sampler })
    }

    fn expectations(&self, psi: &Array1<Complex64>, node: usize) -> (Vec<f64>, f64) {
        let n = self.sys.channels();
        let mut out = Vec::with_capacity(n);
        let mut worst_im = 0.0f64;
        for k in 0..n {
            let value = match &self.node_ops {
                None => {
                    // diagonal couplings: Σ_j a_kj |ψ_j|², exactly real
                    let op = &self.sys.coupling()[k];
                    (0..self.sys.dim())
                        .map(|j| Complex64::new(op[(j, j)].re * psi[j].norm_sqr(), 0.0))
                        .sum::<Complex64>()
                }
                Some(ops) => {
                    let a_psi = ops[node][k].dot(psi);
                    psi.iter().zip(a_psi.iter()).map(|(p, q)| p.conj() * q).sum()
                }
            };
            worst_im = worst_im.max(value.im.abs());
            out.push(value.re);
        }
        (out, worst_im)
    }

    /// Inner estimate of the linear state at `node` for the current shifted
    /// field; returns the (unnormalized) mean and, for Mc, its stderr.
    fn inner_state(
        &self,
        current: &FieldRealization,
        node: usize,
        step_seed: u64,
    ) -> Result<(Array1<Complex64>, Option<Array1<f64>>)> {
        match self.mode {
            InnerMode::Oracle => {
                let oracle = self.oracle.as_ref().expect("oracle prepared in new()");
                Ok((oracle.linear_state(current, node)?, None))
            }
            InnerMode::Mc { n_eta } => {
                let d = self.sys.dim();
                let n = self.sys.channels();
                let mut sum = Array1::<Complex64>::zeros(d);
                let mut sum_re2 = vec![0.0f64; d];
                let mut sum_im2 = vec![0.0f64; d];
                match self.inner_eta.as_ref().expect("inner sampler prepared") {
                    InnerEta::Prefix { chol, channels } => {
                        let p = (node + 1) * channels;
                        let block = chol.slice(ndarray::s![..p, ..p]);
                        let mut z = Array2::<f64>::zeros((p, n_eta));
                        for col in 0..n_eta {
                            let mut rng = rng_for(step_seed, &[domain::FIELD, col as u64]);
                            for r in 0..p {
                                z[(r, col)] = rng.sample(StandardNormal);
                            }
                        }
                        let y = block.dot(&z);
                        for col in 0..n_eta {
                            let drive = |k: usize, m_node: usize| {
                                current.value(k, m_node)
                                    + Complex64::new(y[(m_node * n + k, col)], 0.0)
                            };
                            let psi = self.prop.endpoint_with(&drive, node)?;
                            accumulate(&mut sum, &mut sum_re2, &mut sum_im2, &psi);
                        }
                    }
                    InnerEta::Full { sampler } => {
                        let fields = sampler.sample(step_seed, n_eta);
                        for eta in &fields {
                            let drive = |k: usize, m_node: usize| {
                                current.value(k, m_node) + eta.value(k, m_node)
                            };
                            let psi = self.prop.endpoint_with(&drive, node)?;
                            accumulate(&mut sum, &mut sum_re2, &mut sum_im2, &psi);
                        }
                    }
                }
                let count = n_eta as f64;
                let mean = sum.mapv(|z| z / count);
                let stderr = Array1::from_shape_fn(d, |j| {
                    let se_re = crate::stats::stderr_of_mean(
                        sum_re2[j] / count,
                        mean[j].re * mean[j].re,
                        count,
                    );
                    let se_im = crate::stats::stderr_of_mean(
                        sum_im2[j] / count,
                        mean[j].im * mean[j].im,
                        count,
                    );
                    se_re.hypot(se_im)
                });
                Ok((mean, Some(stderr)))
            }
        }
    }

    /// Sample one norm-preserving trajectory from a base field draw.
    pub fn trajectory(&self, xi: &FieldRealization, seed: u64) -> Result<NonlinearTrajectory> {
        let grid = self.kernels.grid();
        let m = grid.len();
        let d = self.sys.dim();
        if xi.channels() != self.sys.channels() || xi.nodes() != m {
            return Err(Error::ShapeMismatch {
                expected: format!("{} channels x {m} nodes", self.sys.channels()),
                got: format!("{} x {}", xi.channels(), xi.nodes()),
            });
        }

        let mut states = Array2::<Complex64>::zeros((m, d));
        states.row_mut(0).assign(&normalize(self.sys.psi0())?);
        let mut shifted = ShiftedField::new(xi.clone());
        let mut max_im = 0.0f64;
        let mut endpoint_stderr = None;
        let mut endpoint_raw_norm = None;

        for v in 0..m - 1 {
            let psi_v = states.row(v).to_owned();
            let (exp_a, im) = self.expectations(&psi_v, v);
            max_im = max_im.max(im);
            shift_field(&mut shifted, &exp_a, self.kernels.correlation(), grid.dt())?;

            let step_seed = mix(seed, &[domain::INNER, v as u64]);
            let (raw, stderr) = self.inner_state(shifted.current(), v + 1, step_seed)?;
            states.row_mut(v + 1).assign(&normalize(&raw)?);
            if v + 1 == m - 1 {
                if stderr.is_some() {
                    endpoint_raw_norm =
                        Some(raw.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt());
                }
                endpoint_stderr = stderr;
            }
        }

        Ok(NonlinearTrajectory {
            trajectory: StateTrajectory {
                grid: *grid,
                states,
            },
            max_im_expectation: max_im,
            endpoint_stderr,
            endpoint_raw_norm,
        })
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }
}

/// One norm-preserving trajectory (convenience wrapper over
/// [`NonlinearSampler`]).
pub fn nonlinear_trajectory(
    sys: &SystemSpec,
    kernels: &KernelSet,
    xi: &FieldRealization,
    mode: InnerMode,
    seed: u64,
    scheme: Scheme,
) -> Result<NonlinearTrajectory> {
    NonlinearSampler::new(sys, kernels, mode, scheme)?.trajectory(xi, seed)
}

/// How the linear states behind the reweighting are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearSolverMode {
    /// Exact commuting-class solution.
    Oracle,
    /// Auxiliary-noise average with `n_eta` draws per field sample.
    Mc { n_eta: usize },
}

/// Normalized linear states with their cooked weights at a set of nodes.
pub struct WeightedEnsemble {
    /// One list per requested node.
    pub per_node: Vec<Vec<WeightedSample>>,
    pub skipped: usize,
    pub samples: usize,
}

/// Draw `n_xi` driving fields and return the normalized linear state and
/// weight ‖ψ_ξ(t)‖² at each requested node.
#[allow(clippy::too_many_arguments)]
pub fn weighted_linear_states(
    sys: &SystemSpec,
    kernels: &KernelSet,
    nodes: &[usize],
    n_xi: usize,
    solver: LinearSolverMode,
    seed: u64,
    scheme: Scheme,
) -> Result<WeightedEnsemble> {
    if n_xi < 2 {
        return Err(Error::Precondition("weighted sampling needs n_xi ≥ 2".into()));
    }
    let grid = kernels.grid();
    for &node in nodes {
        if node >= grid.len() {
            return Err(Error::Precondition(format!(
                "node {node} outside grid of {} nodes",
                grid.len()
            )));
        }
    }
    let xi_sampler = kernels.xi_sampler()?;
    let xi_seed = mix(seed, &[domain::XI]);

    let oracle = match solver {
        LinearSolverMode::Oracle => {
            if !(sys.is_diagonal() && sys.channels() == 1) {
                return Err(Error::Precondition(
                    "the oracle linear solver needs a single diagonal coupling".into(),
                ));
            }
            let diag: Array1<f64> =
                Array1::from_iter((0..sys.dim()).map(|j| sys.coupling()[0][(j, j)].re));
            Some(CommutingOracle::from_discretized(
                diag,
                sys.psi0().clone(),
                kernels.correlation(),
                grid,
            )?)
        }
        LinearSolverMode::Mc { .. } => None,
    };
    let eta_sampler = match solver {
        LinearSolverMode::Mc { .. } => Some(kernels.eta_sampler()?),
        LinearSolverMode::Oracle => None,
    };
    let prop = Propagator::new(sys, grid, scheme);

    struct Chunk {
        per_node: Vec<Vec<WeightedSample>>,
        skipped: usize,
    }

    let chunk_size = 256usize;
    let starts: Vec<usize> = (0..n_xi).step_by(chunk_size).collect();
    let chunks: Vec<Result<Chunk>> = starts
        .par_iter()
        .map(|&start| {
            let len = chunk_size.min(n_xi - start);
            let xi_fields = xi_sampler.sample_range(xi_seed, start as u64, len);
            let mut per_node: Vec<Vec<WeightedSample>> =
                nodes.iter().map(|_| Vec::with_capacity(len)).collect();
            let mut skipped = 0usize;
            for (offset, xi) in xi_fields.iter().enumerate() {
                let index = start + offset;
                let states: Vec<Array1<Complex64>> = match solver {
                    LinearSolverMode::Oracle => {
                        let oracle = oracle.as_ref().unwrap();
                        nodes
                            .iter()
                            .map(|&node| oracle.linear_state(xi, node))
                            .collect::<Result<_>>()?
                    }
                    LinearSolverMode::Mc { n_eta } => {
                        let est = crate::linear::unravel_with_sampler(
                            &prop,
                            xi,
                            eta_sampler.as_ref().unwrap(),
                            n_eta,
                            mix(seed, &[domain::ETA_FIRST, index as u64]),
                        )?;
                        nodes.iter().map(|&node| est.mean.row(node).to_owned()).collect()
                    }
                };
                for (slot, psi) in per_node.iter_mut().zip(states) {
                    let weight = psi.iter().map(|z| z.norm_sqr()).sum::<f64>();
                    match normalize(&psi) {
                        Ok(state) => slot.push(WeightedSample { state, weight }),
                        Err(Error::ZeroNormState) => skipped += 1,
                        Err(e) => return Err(e),
                    }
                }
            }
            Ok(Chunk { per_node, skipped })
        })
        .collect();

    let mut per_node: Vec<Vec<WeightedSample>> = nodes.iter().map(|_| Vec::new()).collect();
    let mut skipped = 0usize;
    for chunk in chunks {
        let chunk = chunk?;
        skipped += chunk.skipped;
        for (total, part) in per_node.iter_mut().zip(chunk.per_node) {
            total.extend(part);
        }
    }
    Ok(WeightedEnsemble {
        per_node,
        skipped,
        samples: n_xi,
    })
}

/// Cooked-measure expectation of a functional of the normalized state at one
/// node, estimated as mean(w·φ) over base-measure draws. The mean weight is
/// returned as a diagnostic; it estimates E‖ψ‖² = 1.
#[derive(Debug, Clone)]
pub struct ReweightedExpectation {
    pub value: Array1<f64>,
    pub stderr: Array1<f64>,
    pub mean_weight: f64,
    pub mean_weight_stderr: f64,
    pub skipped: usize,
    pub samples: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn reweighted_expectation(
    sys: &SystemSpec,
    kernels: &KernelSet,
    phi: &(impl Fn(&Array1<Complex64>) -> Array1<f64> + Sync),
    node: usize,
    n_xi: usize,
    solver: LinearSolverMode,
    seed: u64,
    scheme: Scheme,
) -> Result<ReweightedExpectation> {
    let ensemble = weighted_linear_states(sys, kernels, &[node], n_xi, solver, seed, scheme)?;
    let samples = &ensemble.per_node[0];
    let width = phi(&normalize(sys.psi0())?).len();

    let mut sum = Array1::<f64>::zeros(width);
    let mut sum_sq = Array1::<f64>::zeros(width);
    let mut w_sum = 0.0f64;
    let mut w_sum_sq = 0.0f64;
    for s in samples {
        let contrib = phi(&s.state).mapv(|x| x * s.weight);
        sum += &contrib;
        sum_sq += &contrib.mapv(|x| x * x);
        w_sum += s.weight;
        w_sum_sq += s.weight * s.weight;
    }
    // Skipped (vanishing-norm) draws contribute zero weight but still count.
    let n = ensemble.samples as f64;
    let value = sum.mapv(|x| x / n);
    let stderr = Array1::from_shape_fn(width, |j| {
        crate::stats::stderr_of_mean(sum_sq[j] / n, value[j] * value[j], n)
    });
    let mean_weight = w_sum / n;
    Ok(ReweightedExpectation {
        value,
        stderr,
        mean_weight,
        mean_weight_stderr: crate::stats::stderr_of_mean(w_sum_sq / n, mean_weight * mean_weight, n),
        skipped: ensemble.skipped,
        samples: ensemble.samples,
    })
}

/// Sample `n_traj` norm-preserving trajectories (independent base fields)
/// and evaluate a scalar observable of the normalized state at the given
/// nodes. Returns one list per node.
#[allow(clippy::too_many_arguments)]
pub fn nonlinear_observable_samples(
    sys: &SystemSpec,
    kernels: &KernelSet,
    observable: &(impl Fn(&Array1<Complex64>) -> f64 + Sync),
    nodes: &[usize],
    n_traj: usize,
    mode: InnerMode,
    seed: u64,
    scheme: Scheme,
) -> Result<Vec<Vec<f64>>> {
    let sampler = NonlinearSampler::new(sys, kernels, mode, scheme)?;
    let xi_sampler = kernels.xi_sampler()?;
    let xi_seed = mix(seed, &[domain::XI]);

    let chunk_size = 16usize;
    let starts: Vec<usize> = (0..n_traj).step_by(chunk_size).collect();
    let chunks: Vec<Result<Vec<Vec<f64>>>> = starts
        .par_iter()
        .map(|&start| {
            let len = chunk_size.min(n_traj - start);
            let xi_fields = xi_sampler.sample_range(xi_seed, start as u64, len);
            let mut values: Vec<Vec<f64>> = nodes.iter().map(|_| Vec::with_capacity(len)).collect();
            for (offset, xi) in xi_fields.iter().enumerate() {
                let index = start + offset;
                let traj = sampler.trajectory(xi, mix(seed, &[domain::ETA_FIRST, index as u64]))?;
                for (slot, &node) in values.iter_mut().zip(nodes) {
                    slot.push(observable(&traj.trajectory.state(node)));
                }
            }
            Ok(values)
        })
        .collect();

    let mut out: Vec<Vec<f64>> = nodes.iter().map(|_| Vec::new()).collect();
    for chunk in chunks {
        let chunk = chunk?;
        for (total, part) in out.iter_mut().zip(chunk) {
            total.extend(part);
        }
    }
    Ok(out)
}

fn accumulate(
    sum: &mut Array1<Complex64>,
    sum_re2: &mut [f64],
    sum_im2: &mut [f64],
    psi: &Array1<Complex64>,
) {
    for (j, z) in psi.iter().enumerate() {
        sum[j] += z;
        sum_re2[j] += z.re * z.re;
        sum_im2[j] += z.im * z.im;
    }
}
