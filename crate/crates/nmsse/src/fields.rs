//! Zero-mean complex Gaussian fields on the grid.
//!
//! A field with correlation kernel C = E[f f*] and relation kernel S = E[f f]
//! is sampled through the real covariance of the stacked vector (Re f, Im f):
//!
//!   E[Re Re] = Re(C+S)/2      E[Im Im] = Re(C-S)/2
//!   E[Re Im] = (Im S - Im C)/2   E[Im Re] = (Im S + Im C)/2
//!
//! The embedding is factorized by eigendecomposition with clipping of the
//! tiny negative eigenvalues that discretized kernels routinely acquire from
//! rounding; plain Cholesky would fail spuriously on those.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernels::DiscretizedKernel;
use crate::linalg;
use crate::rng::{domain, rng_for};

/// One sampled field trajectory: `n` channels by `M` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldRealization {
    values: Array2<Complex64>,
}

impl FieldRealization {
    pub fn zeros(channels: usize, nodes: usize) -> Self {
        Self {
            values: Array2::zeros((channels, nodes)),
        }
    }

    pub fn from_values(values: Array2<Complex64>) -> Self {
        Self { values }
    }

    /// Sample a closure field at the grid nodes.
    pub fn from_fn(
        channels: usize,
        grid: &crate::grid::TimeGrid,
        f: impl Fn(usize, f64) -> Complex64,
    ) -> Self {
        Self {
            values: Array2::from_shape_fn((channels, grid.len()), |(k, m)| f(k, grid.node(m))),
        }
    }

    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn nodes(&self) -> usize {
        self.values.ncols()
    }

    pub fn value(&self, channel: usize, node: usize) -> Complex64 {
        self.values[(channel, node)]
    }

    pub fn values(&self) -> &Array2<Complex64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<Complex64> {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values
            .iter()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// What eigenvalue clipping did during factorization.
#[derive(Debug, Clone, Copy, Default)]
pub struct ClipReport {
    /// Number of eigenvalues clipped to zero.
    pub clipped: usize,
    /// Total magnitude of the clipped eigenvalues.
    pub clipped_mass: f64,
    /// Smallest eigenvalue before clipping.
    pub min_eig: f64,
}

/// Factorized sampler for one (correlation, relation) kernel pair.
#[derive(Debug, Clone)]
pub struct FieldSampler {
    channels: usize,
    nodes: usize,
    embedding: Array2<f64>,
    /// (2nM) × r factor with factor·factorᵀ = embedding after clipping;
    /// zero-eigenvalue directions are dropped, so r ≤ 2nM.
    factor: Array2<f64>,
    clip: ClipReport,
}

/// Real covariance of the (Re, Im) embedding for a kernel pair. Checks that
/// the correlation side is Hermitian and the relation side symmetric.
pub fn embedding_covariance(
    corr: &DiscretizedKernel,
    rel: &DiscretizedKernel,
) -> Result<Array2<f64>> {
    if corr.channels() != rel.channels() || corr.nodes() != rel.nodes() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}ch x {}nodes", corr.channels(), corr.nodes()),
            got: format!("{}ch x {}nodes", rel.channels(), rel.nodes()),
        });
    }
    let herm = linalg::hermitian_residual(corr.values());
    if herm > 1e-10 {
        return Err(Error::NotHermitian { residual: herm });
    }
    let sym = linalg::symmetric_residual(rel.values());
    if sym > 1e-10 {
        return Err(Error::KernelNotSymmetric { residual: sym });
    }

    let dim = corr.values().nrows();
    let mut emb = Array2::<f64>::zeros((2 * dim, 2 * dim));
    for i in 0..dim {
        for j in 0..dim {
            let c = corr.values()[(i, j)];
            let r = rel.values()[(i, j)];
            emb[(i, j)] = 0.5 * (c.re + r.re);
            emb[(i + dim, j + dim)] = 0.5 * (c.re - r.re);
            emb[(i, j + dim)] = 0.5 * (r.im - c.im);
            emb[(i + dim, j)] = 0.5 * (r.im + c.im);
        }
    }
    Ok(emb)
}

/// Reassemble the (correlation, relation) pair from an embedding covariance.
/// Exact inverse of [`embedding_covariance`].
pub fn kernels_from_embedding(emb: &Array2<f64>) -> (Array2<Complex64>, Array2<Complex64>) {
    let dim = emb.nrows() / 2;
    let mut corr = Array2::<Complex64>::zeros((dim, dim));
    let mut rel = Array2::<Complex64>::zeros((dim, dim));
    for i in 0..dim {
        for j in 0..dim {
            let xx = emb[(i, j)];
            let yy = emb[(i + dim, j + dim)];
            let xy = emb[(i, j + dim)];
            let yx = emb[(i + dim, j)];
            corr[(i, j)] = Complex64::new(xx + yy, yx - xy);
            rel[(i, j)] = Complex64::new(xx - yy, xy + yx);
        }
    }
    (corr, rel)
}

/// Build a sampler for the pair (corr = E[ff*], rel = E[ff]).
///
/// Eigenvalues of the embedding in `[-clip_tol, 0)` are clipped to zero with
/// `clip_tol = 1e-8 ×` mean diagonal; anything below `-clip_tol` means the
/// pair is not a valid complex Gaussian law and is rejected.
pub fn build_sampler(corr: &DiscretizedKernel, rel: &DiscretizedKernel) -> Result<FieldSampler> {
    let embedding = embedding_covariance(corr, rel)?;
    let dim = embedding.nrows();
    let clip_tol = 1e-8 * embedding.diag().sum() / dim as f64;

    let (values, vectors) = linalg::sym_eigen(&embedding);
    let min_eig = values.iter().copied().fold(f64::INFINITY, f64::min);
    if min_eig < -clip_tol {
        return Err(Error::NotPositive { min_eig });
    }

    let mut clipped = 0usize;
    let mut clipped_mass = 0.0f64;
    let mut kept: Vec<usize> = Vec::new();
    for (idx, &lambda) in values.iter().enumerate() {
        if lambda > 0.0 {
            kept.push(idx);
        } else {
            if lambda < 0.0 {
                clipped += 1;
                clipped_mass += -lambda;
            }
            // exact zeros carry no mass and are simply dropped
        }
    }

    let mut factor = Array2::<f64>::zeros((dim, kept.len()));
    for (col, &idx) in kept.iter().enumerate() {
        let scale = values[idx].sqrt();
        for row in 0..dim {
            factor[(row, col)] = vectors[(row, idx)] * scale;
        }
    }

    Ok(FieldSampler {
        channels: corr.channels(),
        nodes: corr.nodes(),
        embedding,
        factor,
        clip: ClipReport {
            clipped,
            clipped_mass,
            min_eig,
        },
    })
}

impl FieldSampler {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn embedding(&self) -> &Array2<f64> {
        &self.embedding
    }

    pub fn factor(&self) -> &Array2<f64> {
        &self.factor
    }

    pub fn factor_rank(&self) -> usize {
        self.factor.ncols()
    }

    pub fn clip_report(&self) -> &ClipReport {
        &self.clip
    }

    /// The (correlation, relation) pair this sampler realizes, reassembled
    /// from the embedding blocks.
    pub fn target_kernels(&self) -> (Array2<Complex64>, Array2<Complex64>) {
        kernels_from_embedding(&self.embedding)
    }

    fn fill_normals(&self, seed: u64, index: u64, column: &mut [f64]) {
        let mut rng = rng_for(seed, &[domain::FIELD, index]);
        for x in column.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
    }

    fn assemble(&self, stacked: ndarray::ArrayView1<'_, f64>) -> FieldRealization {
        let half = self.channels * self.nodes;
        let mut values = Array2::<Complex64>::zeros((self.channels, self.nodes));
        for k in 0..self.channels {
            for m in 0..self.nodes {
                let flat = k * self.nodes + m;
                values[(k, m)] = Complex64::new(stacked[flat], stacked[half + flat]);
            }
        }
        FieldRealization { values }
    }

    /// Draw `count` fields for sample indices `start..start+count`. The draw
    /// at index `i` depends only on `(seed, i)`.
    pub fn sample_range(&self, seed: u64, start: u64, count: usize) -> Vec<FieldRealization> {
        let rank = self.factor_rank();
        let mut z = Array2::<f64>::zeros((rank, count));
        let mut buf = vec![0.0f64; rank];
        for col in 0..count {
            self.fill_normals(seed, start + col as u64, &mut buf);
            z.column_mut(col).assign(&Array1::from_iter(buf.iter().copied()));
        }
        let x = self.factor.dot(&z);
        (0..count).map(|col| self.assemble(x.column(col))).collect()
    }

    /// Draw fields for indices `0..count`.
    pub fn sample(&self, seed: u64, count: usize) -> Vec<FieldRealization> {
        self.sample_range(seed, 0, count)
    }

    /// The single draw at `index`; bitwise equal to the corresponding entry
    /// of any batch containing it.
    pub fn sample_at(&self, seed: u64, index: u64) -> FieldRealization {
        self.sample_range(seed, index, 1).pop().unwrap()
    }
}

/// Empirical two-point functions of a set of field draws.
#[derive(Debug, Clone)]
pub struct EmpiricalCorrelations {
    pub corr: Array2<Complex64>,
    pub rel: Array2<Complex64>,
    pub corr_stderr: Array2<f64>,
    pub rel_stderr: Array2<f64>,
    pub samples: usize,
}

/// corr_ab = mean(f_a conj(f_b)), rel_ab = mean(f_a f_b), with per-entry
/// standard errors estimated from the sample fourth moments.
pub fn empirical_correlations(samples: &[FieldRealization]) -> Result<EmpiricalCorrelations> {
    let count = samples.len();
    if count < 2 {
        return Err(Error::Precondition(
            "empirical correlations need at least two samples".into(),
        ));
    }
    let (n, m) = (samples[0].channels(), samples[0].nodes());
    let dim = n * m;

    // Stack Re and Im parts as (dim × N) matrices; all four real Gram
    // matrices then come from fast real matmuls.
    let mut x = Array2::<f64>::zeros((dim, count));
    let mut y = Array2::<f64>::zeros((dim, count));
    for (col, f) in samples.iter().enumerate() {
        if f.channels() != n || f.nodes() != m {
            return Err(Error::ShapeMismatch {
                expected: format!("{n}x{m}"),
                got: format!("{}x{}", f.channels(), f.nodes()),
            });
        }
        for k in 0..n {
            for node in 0..m {
                let z = f.value(k, node);
                x[(k * m + node, col)] = z.re;
                y[(k * m + node, col)] = z.im;
            }
        }
    }
    let xt = x.t();
    let yt = y.t();
    let xx = x.dot(&xt);
    let yy = y.dot(&yt);
    let xy = x.dot(&yt);
    let yx = y.dot(&xt);

    let inv = 1.0 / count as f64;
    let corr = Array2::from_shape_fn((dim, dim), |(a, b)| {
        Complex64::new((xx[(a, b)] + yy[(a, b)]) * inv, (yx[(a, b)] - xy[(a, b)]) * inv)
    });
    let rel = Array2::from_shape_fn((dim, dim), |(a, b)| {
        Complex64::new((xx[(a, b)] - yy[(a, b)]) * inv, (xy[(a, b)] + yx[(a, b)]) * inv)
    });

    // E|f_a f_b|² = E[|f_a|² |f_b|²] serves both products.
    let g = &x * &x + &y * &y;
    let second = g.dot(&g.t());
    let make_stderr = |mean: &Array2<Complex64>| {
        Array2::from_shape_fn((dim, dim), |(a, b)| {
            crate::stats::stderr_of_mean(second[(a, b)] * inv, mean[(a, b)].norm_sqr(), count as f64)
        })
    };
    let corr_stderr = make_stderr(&corr);
    let rel_stderr = make_stderr(&rel);

    Ok(EmpiricalCorrelations {
        corr,
        rel,
        corr_stderr,
        rel_stderr,
        samples: count,
    })
}

/// Two sides of the Gaussian characteristic-function identity evaluated on
/// the grid with plain Riemann weights `dt`:
///
///   empirical = mean over draws of exp{-i Σ_m dt (a_m·f_m - b_m·f_m*)}
///   analytic  = exp{Σ dt² [C a b - (S a a + S* b b)/2]}
#[derive(Debug, Clone, Copy)]
pub struct CharacteristicCheck {
    pub empirical: Complex64,
    pub analytic: Complex64,
    pub stderr: f64,
}

pub fn characteristic_check(
    sampler: &FieldSampler,
    a: &Array2<Complex64>,
    b: &Array2<Complex64>,
    dt: f64,
    draws: usize,
    seed: u64,
) -> Result<CharacteristicCheck> {
    let (n, m) = (sampler.channels(), sampler.nodes());
    if a.dim() != (n, m) || b.dim() != (n, m) {
        return Err(Error::ShapeMismatch {
            expected: format!("{n}x{m}"),
            got: format!("{:?} / {:?}", a.dim(), b.dim()),
        });
    }
    if draws < 1000 {
        return Err(Error::Precondition(
            "characteristic_check needs draws ≥ 1000".into(),
        ));
    }

    let fields = sampler.sample(seed, draws);
    let mut sum = Complex64::ZERO;
    let mut sum_sq = 0.0f64;
    for f in &fields {
        let mut phase = Complex64::ZERO;
        for k in 0..n {
            for node in 0..m {
                let fv = f.value(k, node);
                phase += dt * (a[(k, node)] * fv - b[(k, node)] * fv.conj());
            }
        }
        let value = (Complex64::new(0.0, -1.0) * phase).exp();
        sum += value;
        sum_sq += value.norm_sqr();
    }
    let empirical = sum / draws as f64;
    let stderr =
        crate::stats::stderr_of_mean(sum_sq / draws as f64, empirical.norm_sqr(), draws as f64);

    let (corr, rel) = sampler.target_kernels();
    let dim = n * m;
    let flat = |arr: &Array2<Complex64>, idx: usize| arr[(idx / m, idx % m)];
    let mut exponent = Complex64::ZERO;
    for p in 0..dim {
        for q in 0..dim {
            let ap = flat(a, p);
            let aq = flat(a, q);
            let bp = flat(b, p);
            let bq = flat(b, q);
            exponent += dt * dt
                * (corr[(p, q)] * ap * bq
                    - 0.5 * (rel[(p, q)] * ap * aq + rel[(p, q)].conj() * bp * bq));
        }
    }
    Ok(CharacteristicCheck {
        empirical,
        analytic: exponent.exp(),
        stderr,
    })
}

/// Worst deviation of the empirical two-point functions from their targets,
/// in units of the per-entry standard error.
#[derive(Debug, Clone, Copy)]
pub struct CovarianceReport {
    pub max_corr_sigma: f64,
    pub max_rel_sigma: f64,
    pub draws: usize,
}

pub fn covariance_report(
    sampler: &FieldSampler,
    target_corr: &Array2<Complex64>,
    target_rel: &Array2<Complex64>,
    draws: usize,
    seed: u64,
) -> Result<CovarianceReport> {
    let fields = sampler.sample(seed, draws);
    let emp = empirical_correlations(&fields)?;
    let sigma = |hat: &Array2<Complex64>, target: &Array2<Complex64>, stderr: &Array2<f64>| {
        let mut worst = 0.0f64;
        for ((idx, h), t) in hat.indexed_iter().zip(target.iter()) {
            let dev = (h - t).norm();
            if dev == 0.0 {
                continue;
            }
            let se = stderr[idx];
            worst = worst.max(if se > 0.0 { dev / se } else { f64::INFINITY });
        }
        worst
    };
    Ok(CovarianceReport {
        max_corr_sigma: sigma(&emp.corr, target_corr, &emp.corr_stderr),
        max_rel_sigma: sigma(&emp.rel, target_rel, &emp.rel_stderr),
        draws,
    })
}
