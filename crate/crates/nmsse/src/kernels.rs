//! Two-point kernels on the time grid: pointwise discretization of the bath
//! correlation kernel D and the relation kernel S, construction of the
//! auxiliary kernel K, selection of the free kernel J, and positive
//! semi-definiteness certificates for the stacked block kernel.
//!
//! A discretized kernel is an (nM)×(nM) complex matrix whose entry
//! ((i,a),(j,b)) holds kernel_ij(t_a, t_b); rows and columns are flattened
//! channel-major as `i·M + a`.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fields::embedding_covariance;
use crate::grid::TimeGrid;
use crate::linalg;

type KernelFn = dyn Fn(usize, usize, f64, f64) -> Complex64 + Send + Sync;

/// Continuous kernel pair (D, S) for `n` coupling channels.
///
/// D must be Hermitian as a kernel, `D_ij(τ,s) = conj(D_ji(s,τ))`; the
/// relation kernel S must be symmetric, `S_ij(τ,s) = S_ji(s,τ)`. S defaults
/// to zero (isotropic driving noise).
pub struct KernelSpec {
    channels: usize,
    correlation: Box<KernelFn>,
    relation: Box<KernelFn>,
}

impl KernelSpec {
    pub fn new(
        channels: usize,
        correlation: impl Fn(usize, usize, f64, f64) -> Complex64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            channels,
            correlation: Box::new(correlation),
            relation: Box::new(|_, _, _, _| Complex64::ZERO),
        }
    }

    pub fn with_relation(
        mut self,
        relation: impl Fn(usize, usize, f64, f64) -> Complex64 + Send + Sync + 'static,
    ) -> Self {
        self.relation = Box::new(relation);
        self
    }

    /// Single-channel stationary kernel `e^{-rate·|τ-s|}`.
    pub fn exponential(rate: f64) -> Self {
        Self::new(1, move |_, _, tau, s| {
            Complex64::new((-rate * (tau - s).abs()).exp(), 0.0)
        })
    }

    /// Single-channel single-mode kernel `e^{-i ω₀ (τ-s)}`.
    pub fn single_mode(omega0: f64) -> Self {
        Self::new(1, move |_, _, tau, s| {
            Complex64::new(0.0, -omega0 * (tau - s)).exp()
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn correlation(&self, i: usize, j: usize, tau: f64, s: f64) -> Complex64 {
        (self.correlation)(i, j, tau, s)
    }

    pub fn relation(&self, i: usize, j: usize, tau: f64, s: f64) -> Complex64 {
        (self.relation)(i, j, tau, s)
    }
}

/// Which of the two kernels of a [`KernelSpec`] to sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelSide {
    Correlation,
    Relation,
}

/// Structural tag of a discretized kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    /// D (or J): Hermitian.
    Correlation,
    /// S: complex-symmetric.
    Relation,
    /// K: complex-symmetric by construction.
    Auxiliary,
    /// A chosen J: Hermitian.
    Free,
}

/// A two-point kernel sampled on the grid.
#[derive(Debug, Clone)]
pub struct DiscretizedKernel {
    channels: usize,
    nodes: usize,
    kind: KernelKind,
    values: Array2<Complex64>,
    sym_residual: f64,
}

impl DiscretizedKernel {
    pub fn zero(channels: usize, nodes: usize, kind: KernelKind) -> Self {
        Self {
            channels,
            nodes,
            kind,
            values: Array2::zeros((channels * nodes, channels * nodes)),
            sym_residual: 0.0,
        }
    }

    /// Wrap an already-sampled matrix, enforcing the structure implied by
    /// `kind` through symmetrization.
    pub fn from_matrix(
        channels: usize,
        nodes: usize,
        kind: KernelKind,
        values: Array2<Complex64>,
    ) -> Result<Self> {
        let dim = channels * nodes;
        if values.nrows() != dim || values.ncols() != dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{dim}x{dim}"),
                got: format!("{}x{}", values.nrows(), values.ncols()),
            });
        }
        if values.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFiniteKernelValue {
                i: 0,
                j: 0,
                tau: f64::NAN,
                s: f64::NAN,
            });
        }
        let mut out = Self {
            channels,
            nodes,
            kind,
            values,
            sym_residual: 0.0,
        };
        out.enforce_structure();
        Ok(out)
    }

    /// Average the matrix with its conjugate transpose (Hermitian kinds) or
    /// its transpose (symmetric kinds) and record the relative correction.
    fn enforce_structure(&mut self) {
        let hermitian = matches!(self.kind, KernelKind::Correlation | KernelKind::Free);
        let scale = linalg::max_abs(&self.values).max(1e-300);
        let mut worst = 0.0f64;
        let dim = self.values.nrows();
        for i in 0..dim {
            for j in i..dim {
                let a = self.values[(i, j)];
                let partner = if hermitian {
                    self.values[(j, i)].conj()
                } else {
                    self.values[(j, i)]
                };
                let avg = 0.5 * (a + partner);
                worst = worst.max((a - avg).norm());
                self.values[(i, j)] = avg;
                self.values[(j, i)] = if hermitian { avg.conj() } else { avg };
            }
        }
        self.sym_residual = worst / scale;
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn values(&self) -> &Array2<Complex64> {
        &self.values
    }

    pub fn entry(&self, i: usize, a: usize, j: usize, b: usize) -> Complex64 {
        self.values[(i * self.nodes + a, j * self.nodes + b)]
    }

    /// Relative magnitude of the symmetrization correction applied when the
    /// kernel was sampled. Values above 1e-8 indicate the continuous kernel
    /// pair violated its Hermiticity/symmetry invariant.
    pub fn sym_residual(&self) -> f64 {
        self.sym_residual
    }

    pub fn is_flagged(&self) -> bool {
        self.sym_residual > 1e-8
    }

    /// Largest diagonal magnitude, the scale used for PSD tolerances.
    pub fn max_diag(&self) -> f64 {
        (0..self.values.nrows()).fold(0.0f64, |acc, i| acc.max(self.values[(i, i)].norm()))
    }

    /// Default PSD tolerance: 1e-8 times the largest diagonal entry.
    pub fn psd_tol(&self) -> f64 {
        1e-8 * self.max_diag()
    }
}

/// Sample one side of a kernel pair on the grid.
pub fn discretize_kernel(
    spec: &KernelSpec,
    side: KernelSide,
    grid: &TimeGrid,
) -> Result<DiscretizedKernel> {
    let n = spec.channels();
    let m = grid.len();
    let dim = n * m;
    let mut values = Array2::<Complex64>::zeros((dim, dim));
    for i in 0..n {
        for a in 0..m {
            for j in 0..n {
                for b in 0..m {
                    let (tau, s) = (grid.node(a), grid.node(b));
                    let v = match side {
                        KernelSide::Correlation => spec.correlation(i, j, tau, s),
                        KernelSide::Relation => spec.relation(i, j, tau, s),
                    };
                    if !v.re.is_finite() || !v.im.is_finite() {
                        return Err(Error::NonFiniteKernelValue { i, j, tau, s });
                    }
                    values[(i * m + a, j * m + b)] = v;
                }
            }
        }
    }
    let kind = match side {
        KernelSide::Correlation => KernelKind::Correlation,
        KernelSide::Relation => KernelKind::Relation,
    };
    DiscretizedKernel::from_matrix(n, m, kind, values)
}

/// Frequency quadrature used by [`kernel_from_coupling`].
#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureGrid {
    pub fn new(nodes: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if nodes.len() != weights.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} weights", nodes.len()),
                got: format!("{}", weights.len()),
            });
        }
        if weights.iter().any(|&w| w.is_nan() || w <= 0.0) {
            return Err(Error::Precondition(
                "quadrature weights must be positive".into(),
            ));
        }
        Ok(Self { nodes, weights })
    }

    /// Trapezoidal weights on a sorted (possibly non-uniform) node set.
    pub fn trapezoid(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::Precondition(
                "trapezoid quadrature needs at least two nodes".into(),
            ));
        }
        let n = nodes.len();
        let mut weights = vec![0.0; n];
        for q in 0..n - 1 {
            let h = nodes[q + 1] - nodes[q];
            if h.is_nan() || h <= 0.0 {
                return Err(Error::Precondition(
                    "quadrature nodes must be strictly increasing".into(),
                ));
            }
            weights[q] += 0.5 * h;
            weights[q + 1] += 0.5 * h;
        }
        Ok(Self { nodes, weights })
    }
}

/// Build the discretized correlation kernel from coupling amplitudes
/// κ(channel, bath, ω):
///
/// D_{(i,a),(j,b)} = Σ_q w_q Σ_ℓ κ_i^ℓ(ω_q) conj(κ_j^ℓ(ω_q)) e^{-i ω_q (t_a - t_b)}
///
/// The sum of outer products makes the result PSD up to quadrature rounding.
pub fn kernel_from_coupling(
    kappa: impl Fn(usize, usize, f64) -> Complex64,
    channels: usize,
    baths: usize,
    omega: &QuadratureGrid,
    grid: &TimeGrid,
) -> Result<DiscretizedKernel> {
    let m = grid.len();
    let dim = channels * m;
    let mut values = Array2::<Complex64>::zeros((dim, dim));
    let mut amplitude = vec![Complex64::ZERO; dim];
    for (&w, &om) in omega.weights.iter().zip(&omega.nodes) {
        for ell in 0..baths {
            for i in 0..channels {
                let k = kappa(i, ell, om);
                if !k.re.is_finite() || !k.im.is_finite() {
                    return Err(Error::NonFiniteKernelValue {
                        i,
                        j: ell,
                        tau: om,
                        s: om,
                    });
                }
                for a in 0..m {
                    amplitude[i * m + a] = k * Complex64::new(0.0, -om * grid.node(a)).exp();
                }
            }
            for r in 0..dim {
                let left = w * amplitude[r];
                for col in 0..dim {
                    values[(r, col)] += left * amplitude[col].conj();
                }
            }
        }
    }
    DiscretizedKernel::from_matrix(channels, m, KernelKind::Correlation, values)
}

/// Auxiliary kernel of the time-local driving noise:
///
/// K_ij(τ,s) = θ(τ-s)·[D-S]_ij(τ,s) + θ(s-τ)·[D-S]_ji(s,τ)
///
/// with the equal-time convention θ(0) = 1/2, which makes the diagonal the
/// symmetric average and K exactly complex-symmetric.
pub fn build_k(
    correlation: &DiscretizedKernel,
    relation: &DiscretizedKernel,
) -> Result<DiscretizedKernel> {
    if correlation.channels != relation.channels || correlation.nodes != relation.nodes {
        return Err(Error::ShapeMismatch {
            expected: format!("{}ch x {}nodes", correlation.channels, correlation.nodes),
            got: format!("{}ch x {}nodes", relation.channels, relation.nodes),
        });
    }
    let (n, m) = (correlation.channels, correlation.nodes);
    let w = correlation.values() - relation.values();
    let mut values = Array2::<Complex64>::zeros(w.dim());
    for i in 0..n {
        for a in 0..m {
            for j in 0..n {
                for b in 0..m {
                    let fwd = w[(i * m + a, j * m + b)];
                    let rev = w[(j * m + b, i * m + a)];
                    values[(i * m + a, j * m + b)] = match a.cmp(&b) {
                        std::cmp::Ordering::Greater => fwd,
                        std::cmp::Ordering::Less => rev,
                        std::cmp::Ordering::Equal => 0.5 * (fwd + rev),
                    };
                }
            }
        }
    }
    DiscretizedKernel::from_matrix(n, m, KernelKind::Auxiliary, values)
}

/// Policy for picking the free correlation kernel J.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JPolicy {
    /// J = K. Valid only when K is real symmetric PSD; the auxiliary field
    /// can then be sampled as a real process with covariance K.
    RealField,
    /// J = c·I with the smallest c ≥ 0 making the stacked kernel PSD.
    DiagonalShift,
}

/// The stacked kernel [[J, K], [K*, J*]] together with its PSD certificate.
///
/// The certified object is the real covariance of the (Re, Im) embedding of
/// the auxiliary field, built from (J, K); the block form itself is kept for
/// inspection and export.
#[derive(Debug, Clone)]
pub struct GammaKernel {
    free: DiscretizedKernel,
    auxiliary: DiscretizedKernel,
    assembled: Array2<Complex64>,
    min_eig: f64,
}

impl GammaKernel {
    fn assemble(free: DiscretizedKernel, auxiliary: DiscretizedKernel) -> Result<Self> {
        let dim = auxiliary.values().nrows();
        let mut assembled = Array2::<Complex64>::zeros((2 * dim, 2 * dim));
        for i in 0..dim {
            for j in 0..dim {
                assembled[(i, j)] = free.values()[(i, j)];
                assembled[(i, j + dim)] = auxiliary.values()[(i, j)];
                assembled[(i + dim, j)] = auxiliary.values()[(i, j)].conj();
                assembled[(i + dim, j + dim)] = free.values()[(i, j)].conj();
            }
        }
        let certificate = embedding_covariance(&free, &auxiliary)?;
        let min_eig = linalg::sym_min_eig(&certificate);
        let tol = 1e-8 * linalg::max_abs_real(&certificate).max(1e-300);
        if min_eig < -tol {
            return Err(Error::NotPositive { min_eig });
        }
        Ok(Self {
            free,
            auxiliary,
            assembled,
            min_eig,
        })
    }

    pub fn free(&self) -> &DiscretizedKernel {
        &self.free
    }

    pub fn auxiliary(&self) -> &DiscretizedKernel {
        &self.auxiliary
    }

    pub fn assembled(&self) -> &Array2<Complex64> {
        &self.assembled
    }

    /// Smallest eigenvalue of the real embedding certificate.
    pub fn min_eig(&self) -> f64 {
        self.min_eig
    }
}

/// Choose the free kernel J for a given auxiliary kernel K.
pub fn choose_j(k: &DiscretizedKernel, policy: JPolicy) -> Result<GammaKernel> {
    let tol = k.psd_tol();
    match policy {
        JPolicy::RealField => {
            let max_im = k
                .values()
                .iter()
                .fold(0.0f64, |acc, z| acc.max(z.im.abs()));
            if max_im > tol.max(1e-300) {
                return Err(Error::PolicyInapplicable(format!(
                    "K has imaginary entries up to {max_im:.3e}; a real auxiliary field cannot match it"
                )));
            }
            let re = k.values().mapv(|z| z.re);
            let min_eig = linalg::sym_min_eig(&re);
            if min_eig < -tol {
                return Err(Error::PolicyInapplicable(format!(
                    "K is not PSD as a real kernel (min eigenvalue {min_eig:.3e})"
                )));
            }
            let j = DiscretizedKernel::from_matrix(
                k.channels,
                k.nodes,
                KernelKind::Free,
                k.values().clone(),
            )?;
            GammaKernel::assemble(j, k.clone())
        }
        JPolicy::DiagonalShift => {
            // With J = c·I the embedding certificate is (c·I + B)/2 where
            // B = [[Re K, Im K], [Im K, -Re K]]; the smallest admissible
            // shift is therefore c = max(0, -λ_min(B)).
            let dim = k.values().nrows();
            let mut b = Array2::<f64>::zeros((2 * dim, 2 * dim));
            for i in 0..dim {
                for j in 0..dim {
                    let z = k.values()[(i, j)];
                    b[(i, j)] = z.re;
                    b[(i + dim, j + dim)] = -z.re;
                    b[(i, j + dim)] = z.im;
                    b[(i + dim, j)] = z.im;
                }
            }
            let lambda_min = linalg::sym_min_eig(&b);
            let c = (-lambda_min).max(0.0);
            let mut j_values = Array2::<Complex64>::zeros((dim, dim));
            for i in 0..dim {
                j_values[(i, i)] = Complex64::new(c, 0.0);
            }
            let j = DiscretizedKernel::from_matrix(k.channels, k.nodes, KernelKind::Free, j_values)?;
            GammaKernel::assemble(j, k.clone())
        }
    }
}

/// Result of a PSD certificate.
#[derive(Debug, Clone, Copy)]
pub struct PsdReport {
    pub min_eig: f64,
    pub ok: bool,
}

/// Certify positive semi-definiteness of a Hermitian matrix: `ok` when the
/// smallest eigenvalue is at least `-tol`.
pub fn check_psd(matrix: &Array2<Complex64>, tol: f64) -> Result<PsdReport> {
    if matrix.nrows() != matrix.ncols() {
        return Err(Error::ShapeMismatch {
            expected: "square matrix".into(),
            got: format!("{}x{}", matrix.nrows(), matrix.ncols()),
        });
    }
    let residual = linalg::hermitian_residual(matrix);
    if residual > 1e-10 {
        return Err(Error::NotHermitian { residual });
    }
    let min_eig = linalg::hermitian_min_eig(matrix);
    Ok(PsdReport {
        min_eig,
        ok: min_eig >= -tol,
    })
}

/// Everything the samplers and propagators need for one model on one grid:
/// the sampled (D, S) pair, the auxiliary kernel K and the chosen J.
pub struct KernelSet {
    grid: TimeGrid,
    correlation: DiscretizedKernel,
    relation: DiscretizedKernel,
    gamma: GammaKernel,
}

impl KernelSet {
    pub fn build(spec: &KernelSpec, grid: &TimeGrid, policy: JPolicy) -> Result<Self> {
        let correlation = discretize_kernel(spec, KernelSide::Correlation, grid)?;
        let relation = discretize_kernel(spec, KernelSide::Relation, grid)?;
        let k = build_k(&correlation, &relation)?;
        let gamma = choose_j(&k, policy)?;
        Ok(Self {
            grid: *grid,
            correlation,
            relation,
            gamma,
        })
    }

    /// Assemble from already-discretized kernels (for tabulated couplings).
    pub fn from_parts(
        grid: TimeGrid,
        correlation: DiscretizedKernel,
        relation: DiscretizedKernel,
        gamma: GammaKernel,
    ) -> Result<Self> {
        let m = grid.len();
        for (name, nodes) in [
            ("correlation", correlation.nodes()),
            ("relation", relation.nodes()),
            ("gamma", gamma.auxiliary().nodes()),
        ] {
            if nodes != m {
                return Err(Error::ShapeMismatch {
                    expected: format!("{m} nodes"),
                    got: format!("{nodes} ({name})"),
                });
            }
        }
        if correlation.channels() != relation.channels()
            || correlation.channels() != gamma.auxiliary().channels()
        {
            return Err(Error::ShapeMismatch {
                expected: format!("{} channels", correlation.channels()),
                got: "mismatched channel counts".into(),
            });
        }
        Ok(Self {
            grid,
            correlation,
            relation,
            gamma,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.correlation.channels()
    }

    /// The sampled D.
    pub fn correlation(&self) -> &DiscretizedKernel {
        &self.correlation
    }

    /// The sampled S.
    pub fn relation(&self) -> &DiscretizedKernel {
        &self.relation
    }

    pub fn gamma(&self) -> &GammaKernel {
        &self.gamma
    }

    /// Sampler for the driving field (correlation D, relation S).
    pub fn xi_sampler(&self) -> Result<crate::fields::FieldSampler> {
        crate::fields::build_sampler(&self.correlation, &self.relation)
    }

    /// Sampler for the auxiliary field (correlation J, relation K).
    pub fn eta_sampler(&self) -> Result<crate::fields::FieldSampler> {
        crate::fields::build_sampler(self.gamma.free(), self.gamma.auxiliary())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn exponential_kernel_three_nodes() {
        let grid = TimeGrid::with_nodes(1.0, 3).unwrap();
        let spec = KernelSpec::exponential(1.0);
        let d = discretize_kernel(&spec, KernelSide::Correlation, &grid).unwrap();
        let e1 = (-1.0f64).exp();
        let e2 = (-2.0f64).exp();
        let want = [[1.0, e1, e2], [e1, 1.0, e1], [e2, e1, 1.0]];
        for (a, row) in want.iter().enumerate() {
            for (b, expected) in row.iter().enumerate() {
                assert_abs_diff_eq!(d.entry(0, a, 0, b).re, *expected, epsilon = 1e-15);
                assert_abs_diff_eq!(d.entry(0, a, 0, b).im, 0.0, epsilon = 1e-15);
            }
        }
        assert!(d.sym_residual() < 1e-15);
    }

    #[test]
    fn zero_and_constant_kernels() {
        let grid = TimeGrid::with_nodes(0.5, 4).unwrap();
        let zero = KernelSpec::new(1, |_, _, _, _| Complex64::ZERO);
        let d0 = discretize_kernel(&zero, KernelSide::Correlation, &grid).unwrap();
        assert!(d0.values().iter().all(|z| z.norm() == 0.0));

        let ones = KernelSpec::new(1, |_, _, _, _| c(1.0, 0.0));
        let d1 = discretize_kernel(&ones, KernelSide::Correlation, &grid).unwrap();
        assert!(d1.values().iter().all(|z| (z - c(1.0, 0.0)).norm() < 1e-15));
        // Rank-one and PSD: eigenvalues are {M, 0, 0, 0}.
        let report = check_psd(d1.values(), d1.psd_tol()).unwrap();
        assert!(report.ok);
    }

    #[test]
    fn non_finite_kernel_is_an_error() {
        let grid = TimeGrid::with_nodes(1.0, 2).unwrap();
        let bad = KernelSpec::new(1, |_, _, tau, s| c(1.0 / (tau - s), 0.0));
        assert!(matches!(
            discretize_kernel(&bad, KernelSide::Correlation, &grid),
            Err(Error::NonFiniteKernelValue { .. })
        ));
    }

    #[test]
    fn single_mode_coupling() {
        let grid = TimeGrid::with_nodes(0.7, 3).unwrap();
        let omega0 = 1.3;
        let quad = QuadratureGrid::new(vec![omega0], vec![1.0]).unwrap();
        let d = kernel_from_coupling(|_, _, _| c(1.0, 0.0), 1, 1, &quad, &grid).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let want = c(0.0, -omega0 * (grid.node(a) - grid.node(b))).exp();
                assert!((d.entry(0, a, 0, b) - want).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_coupling_gives_zero_kernel() {
        let grid = TimeGrid::with_nodes(1.0, 3).unwrap();
        let quad = QuadratureGrid::trapezoid(vec![-1.0, 0.0, 1.0]).unwrap();
        let d = kernel_from_coupling(|_, _, _| Complex64::ZERO, 1, 1, &quad, &grid).unwrap();
        assert!(d.values().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn lorentzian_coupling_recovers_exponential() {
        // κ(ω) = sqrt(1/π) / sqrt(1+ω²) gives D(τ,s) = e^{-|τ-s|} in the
        // wide-window limit; the window tail bounds the quadrature error.
        let grid = TimeGrid::with_nodes(0.5, 4).unwrap();
        let half_width = 2000.0;
        let steps = 200_000;
        let nodes: Vec<f64> = (0..=steps)
            .map(|q| -half_width + 2.0 * half_width * q as f64 / steps as f64)
            .collect();
        let quad = QuadratureGrid::trapezoid(nodes).unwrap();
        let d = kernel_from_coupling(
            |_, _, om| c((1.0 / std::f64::consts::PI / (1.0 + om * om)).sqrt(), 0.0),
            1,
            1,
            &quad,
            &grid,
        )
        .unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let want = (-(grid.node(a) - grid.node(b)).abs()).exp();
                assert!(
                    (d.entry(0, a, 0, b) - c(want, 0.0)).norm() < 1e-3,
                    "entry ({a},{b}) off by {}",
                    (d.entry(0, a, 0, b) - c(want, 0.0)).norm()
                );
            }
        }
        let report = check_psd(d.values(), d.psd_tol()).unwrap();
        assert!(report.ok);
    }

    #[test]
    fn build_k_reduces_to_d_for_symmetric_kernels() {
        let grid = TimeGrid::with_nodes(1.0, 3).unwrap();
        let spec = KernelSpec::exponential(1.0);
        let d = discretize_kernel(&spec, KernelSide::Correlation, &grid).unwrap();
        let s = discretize_kernel(&spec, KernelSide::Relation, &grid).unwrap();
        let k = build_k(&d, &s).unwrap();
        for (kv, dv) in k.values().iter().zip(d.values().iter()) {
            assert!((kv - dv).norm() < 1e-15);
        }
    }

    #[test]
    fn build_k_vanishes_when_s_equals_d() {
        let grid = TimeGrid::with_nodes(1.0, 3).unwrap();
        let spec = KernelSpec::exponential(1.0);
        let d = discretize_kernel(&spec, KernelSide::Correlation, &grid).unwrap();
        let k = build_k(&d, &d).unwrap();
        assert!(k.values().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn build_k_single_mode_hand_values() {
        // D(τ,s) = e^{-i(τ-s)}, S = 0, two nodes at spacing 1. Both
        // off-diagonal entries pick the later-time branch e^{-i}; the
        // equal-time entries average to 1.
        let grid = TimeGrid::with_nodes(1.0, 2).unwrap();
        let spec = KernelSpec::single_mode(1.0);
        let d = discretize_kernel(&spec, KernelSide::Correlation, &grid).unwrap();
        let s = DiscretizedKernel::zero(1, 2, KernelKind::Relation);
        let k = build_k(&d, &s).unwrap();
        let em_i = c(0.0, -1.0).exp();
        assert!((k.entry(0, 1, 0, 0) - em_i).norm() < 1e-15);
        assert!((k.entry(0, 0, 0, 1) - em_i).norm() < 1e-15);
        assert!((k.entry(0, 0, 0, 0) - c(1.0, 0.0)).norm() < 1e-15);
        assert!((k.entry(0, 1, 0, 1) - c(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn choose_j_real_field_for_exponential() {
        let grid = TimeGrid::with_nodes(1.0, 11).unwrap();
        let spec = KernelSpec::exponential(1.0);
        let d = discretize_kernel(&spec, KernelSide::Correlation, &grid).unwrap();
        let s = DiscretizedKernel::zero(1, 11, KernelKind::Relation);
        let k = build_k(&d, &s).unwrap();
        let gamma = choose_j(&k, JPolicy::RealField).unwrap();
        for (jv, kv) in gamma.free().values().iter().zip(k.values().iter()) {
            assert!((jv - kv).norm() < 1e-15);
        }
        assert!(gamma.min_eig() >= -k.psd_tol());
    }

    #[test]
    fn choose_j_zero_kernel() {
        let k = DiscretizedKernel::zero(1, 4, KernelKind::Auxiliary);
        let gamma = choose_j(&k, JPolicy::DiagonalShift).unwrap();
        assert!(gamma.free().values().iter().all(|z| z.norm() == 0.0));
        assert!(gamma.assembled().iter().all(|z| z.norm() == 0.0));
        assert!(gamma.min_eig() >= 0.0);
    }

    #[test]
    fn choose_j_diagonal_shift_single_mode() {
        let grid = TimeGrid::with_nodes(1.0, 2).unwrap();
        let spec = KernelSpec::single_mode(1.0);
        let d = discretize_kernel(&spec, KernelSide::Correlation, &grid).unwrap();
        let s = DiscretizedKernel::zero(1, 2, KernelKind::Relation);
        let k = build_k(&d, &s).unwrap();
        assert!(matches!(
            choose_j(&k, JPolicy::RealField),
            Err(Error::PolicyInapplicable(_))
        ));
        let gamma = choose_j(&k, JPolicy::DiagonalShift).unwrap();
        let c_shift = gamma.free().entry(0, 0, 0, 0).re;
        assert!(c_shift > 0.0 && c_shift <= 2.0, "shift {c_shift} out of range");
        // Minimal shift leaves the certificate PSD but tight.
        let tol = k.psd_tol();
        assert!(gamma.min_eig() >= -tol && gamma.min_eig() <= tol);
    }

    #[test]
    fn check_psd_reports() {
        let eye = Array2::from_diag(&ndarray::Array1::from_elem(3, c(1.0, 0.0)));
        let r = check_psd(&eye, 1e-8).unwrap();
        assert!(r.ok);
        assert_abs_diff_eq!(r.min_eig, 1.0, epsilon = 1e-12);

        let mut indef = Array2::<Complex64>::zeros((2, 2));
        indef[(0, 0)] = c(1.0, 0.0);
        indef[(1, 1)] = c(-1e-3, 0.0);
        let r = check_psd(&indef, 1e-8).unwrap();
        assert!(!r.ok);

        let mut skew = Array2::<Complex64>::zeros((2, 2));
        skew[(0, 1)] = c(1.0, 0.0);
        assert!(matches!(
            check_psd(&skew, 1e-8),
            Err(Error::NotHermitian { .. })
        ));
    }

    #[test]
    fn exponential_kernel_is_psd_across_grids() {
        for &m in &[3usize, 30, 300] {
            let grid = TimeGrid::with_nodes(0.01, m).unwrap();
            let spec = KernelSpec::exponential(1.0);
            let d = discretize_kernel(&spec, KernelSide::Correlation, &grid).unwrap();
            let report = check_psd(d.values(), d.psd_tol()).unwrap();
            assert!(report.ok, "M = {m}: min eigenvalue {}", report.min_eig);
        }
    }

    #[test]
    fn coupling_kernels_pass_psd_for_random_tables() {
        use rand::Rng;
        let grid = TimeGrid::with_nodes(0.4, 4).unwrap();
        for trial in 0..8u64 {
            let mut rng = crate::rng::rng_for(0xC0FF_EE00 + trial, &[]);
            let table: Vec<Complex64> = (0..2 * 3 * 5)
                .map(|_| c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
                .collect();
            let nodes: Vec<f64> = (0..5).map(|q| -2.0 + q as f64).collect();
            let quad = QuadratureGrid::trapezoid(nodes).unwrap();
            let d = kernel_from_coupling(
                |i, ell, om| {
                    let q = ((om + 2.0).round() as usize).min(4);
                    table[(i * 3 + ell) * 5 + q]
                },
                2,
                3,
                &quad,
                &grid,
            )
            .unwrap();
            let report = check_psd(d.values(), d.psd_tol()).unwrap();
            assert!(report.ok, "trial {trial}: min eig {}", report.min_eig);
        }
    }
}
