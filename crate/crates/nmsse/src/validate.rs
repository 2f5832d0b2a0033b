//! Aggregated invariant checks over a configured model, at desk scale.
//! The CLI `validate` mode runs these and fails on any red check.

use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::error::Result;
use crate::fields::{covariance_report, FieldRealization};
use crate::grid::TimeGrid;
use crate::kernels::{check_psd, KernelSet};
use crate::linear::{propagate_time_local, unravel_with_sampler, Propagator, Scheme};
use crate::nonlinear::{normalize, reweighted_expectation, LinearSolverMode};
use crate::rng::{domain, mix};
use crate::system::SystemSpec;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn pass(name: &'static str, detail: String) -> Self {
        Self {
            name,
            passed: true,
            detail,
        }
    }

    fn of(name: &'static str, passed: bool, detail: String) -> Self {
        Self {
            name,
            passed,
            detail,
        }
    }
}

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Run every module invariant against the configured model.
pub fn run_all(sys: &SystemSpec, kernels: &KernelSet, seed: u64) -> Result<Vec<CheckResult>> {
    let mut checks = Vec::new();
    let grid = kernels.grid();

    // Kernel structure.
    let d_res = kernels.correlation().sym_residual();
    let s_res = kernels.relation().sym_residual();
    checks.push(CheckResult::of(
        "kernel_structure",
        d_res <= 1e-8 && s_res <= 1e-8,
        format!("symmetrization residuals D {d_res:.2e}, S {s_res:.2e}"),
    ));

    let d_psd = check_psd(kernels.correlation().values(), kernels.correlation().psd_tol())?;
    checks.push(CheckResult::of(
        "correlation_psd",
        d_psd.ok,
        format!("min eigenvalue {:.3e}", d_psd.min_eig),
    ));

    let k = kernels.gamma().auxiliary();
    let k_sym = crate::linalg::symmetric_residual(k.values());
    checks.push(CheckResult::of(
        "auxiliary_symmetry",
        k_sym <= 1e-14,
        format!("complex-symmetry residual {k_sym:.2e}"),
    ));

    let gamma_tol = 1e-8
        * crate::linalg::max_abs_real(
            &crate::fields::embedding_covariance(kernels.gamma().free(), k)?,
        )
        .max(1e-300);
    checks.push(CheckResult::of(
        "gamma_certificate",
        kernels.gamma().min_eig() >= -gamma_tol,
        format!("certificate min eigenvalue {:.3e}", kernels.gamma().min_eig()),
    ));

    // Sampler structure.
    for (name, sampler_res, corr_target, rel_target) in [
        (
            "xi_sampler",
            kernels.xi_sampler(),
            kernels.correlation().values().clone(),
            kernels.relation().values().clone(),
        ),
        (
            "eta_sampler",
            kernels.eta_sampler(),
            kernels.gamma().free().values().clone(),
            kernels.gamma().auxiliary().values().clone(),
        ),
    ] {
        let sampler = sampler_res?;
        let (corr_back, rel_back) = sampler.target_kernels();
        let round = corr_back
            .iter()
            .zip(corr_target.iter())
            .chain(rel_back.iter().zip(rel_target.iter()))
            .fold(0.0f64, |acc, (a, b)| acc.max((a - b).norm()));
        let factor_back = sampler.factor().dot(&sampler.factor().t());
        let dim = factor_back.nrows();
        let tol = (1e-8 * sampler.embedding().diag().sum() / dim as f64)
            .max(sampler.clip_report().clipped_mass)
            .max(1e-12);
        let factor_dev = factor_back
            .iter()
            .zip(sampler.embedding().iter())
            .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        let structure_name: &'static str = match name {
            "xi_sampler" => "xi_sampler_structure",
            _ => "eta_sampler_structure",
        };
        checks.push(CheckResult::of(
            structure_name,
            round <= 1e-12 && factor_dev <= 10.0 * tol,
            format!("roundtrip {round:.2e}, factor deviation {factor_dev:.2e}"),
        ));

        let report = covariance_report(
            &sampler,
            &corr_target,
            &rel_target,
            2000,
            mix(seed, &[domain::TEST_VECTORS, name.len() as u64]),
        )?;
        let stats_name: &'static str = match name {
            "xi_sampler" => "xi_sampler_statistics",
            _ => "eta_sampler_statistics",
        };
        checks.push(CheckResult::of(
            stats_name,
            report.max_corr_sigma <= 6.0 && report.max_rel_sigma <= 6.0,
            format!(
                "worst deviations {:.2}σ (corr), {:.2}σ (rel) over {} draws",
                report.max_corr_sigma, report.max_rel_sigma, report.draws
            ),
        ));
    }

    // Determinism of draws.
    let sampler = kernels.xi_sampler()?;
    let once = sampler.sample(seed, 4);
    let twice = sampler.sample(seed, 4);
    checks.push(CheckResult::of(
        "draw_determinism",
        once == twice,
        "two batches with one seed".into(),
    ));

    // Propagation invariants on a synthetic non-commuting pair, so they are
    // meaningful regardless of the configured system.
    let synthetic = {
        let sx = ndarray::array![[c(0.0, 0.0), c(1.0, 0.0)], [c(1.0, 0.0), c(0.0, 0.0)]];
        let sz = ndarray::array![[c(1.0, 0.0), c(0.0, 0.0)], [c(0.0, 0.0), c(-1.0, 0.0)]];
        SystemSpec::new(
            vec![sx, sz],
            Array2::zeros((2, 2)),
            ndarray::array![c(0.6, 0.0), c(0.8, 0.0)],
        )?
    };
    let synth_grid = TimeGrid::new(1.0, 0.01)?;
    let synth_fields = |g: &TimeGrid| {
        (
            FieldRealization::from_fn(2, g, |k, t| c(0.4 * (2.0 * t + k as f64).cos(), 0.0)),
            FieldRealization::from_fn(2, g, |k, t| c(0.3 * (1.5 * t - k as f64).sin(), 0.0)),
        )
    };
    let (sx_xi, sx_eta) = synth_fields(&synth_grid);
    let traj = propagate_time_local(&synthetic, &sx_xi, &sx_eta, &synth_grid, Scheme::ExpMidpoint)?;
    let norm_drift = (0..synth_grid.len())
        .map(|m| {
            ((0..2).map(|j| traj.states[(m, j)].norm_sqr()).sum::<f64>() - 1.0).abs()
        })
        .fold(0.0f64, f64::max);
    checks.push(CheckResult::of(
        "midpoint_unitarity",
        norm_drift <= 1e-10,
        format!("worst norm drift {norm_drift:.2e} (real drive)"),
    ));

    let endpoint = |dt: f64| -> Result<Array1<Complex64>> {
        let g = TimeGrid::new(1.0, dt)?;
        let (xi, eta) = synth_fields(&g);
        Ok(propagate_time_local(&synthetic, &xi, &eta, &g, Scheme::ExpMidpoint)?
            .state(g.len() - 1))
    };
    let reference = endpoint(0.01 / 16.0)?;
    let err = |psi: &Array1<Complex64>| {
        psi.iter()
            .zip(reference.iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt()
    };
    let e1 = err(&endpoint(0.02)?);
    let e2 = err(&endpoint(0.01)?);
    let ratio = e1 / e2;
    checks.push(CheckResult::of(
        "integrator_second_order",
        (3.0..5.0).contains(&ratio),
        format!("halving dt changed the error by {ratio:.2} (expect ≈ 4)"),
    ));

    // Cooked-measure martingale for the configured model, when the linear
    // solutions are available exactly.
    if sys.is_diagonal() && sys.channels() == 1 && kernels.channels() == 1 {
        let phi = |_: &Array1<Complex64>| ndarray::array![1.0];
        match reweighted_expectation(
            sys,
            kernels,
            &phi,
            grid.len() - 1,
            2000,
            LinearSolverMode::Oracle,
            mix(seed, &[domain::XI, 1]),
            Scheme::ExpMidpoint,
        ) {
            Ok(est) => {
                let dev = (est.mean_weight - 1.0).abs();
                // decoupled systems have exactly unit weights; allow rounding
                checks.push(CheckResult::of(
                    "cooked_weight_martingale",
                    dev <= (5.0 * est.mean_weight_stderr).max(1e-12),
                    format!("mean weight {:.4} ± {:.4}", est.mean_weight, est.mean_weight_stderr),
                ));
            }
            Err(e) => checks.push(CheckResult::pass(
                "cooked_weight_martingale",
                format!("skipped: {e}"),
            )),
        }
    } else {
        checks.push(CheckResult::pass(
            "cooked_weight_martingale",
            "skipped: needs a single diagonal coupling".into(),
        ));
    }

    // Linear unraveling against a fixed field, statistically.
    {
        let eta_sampler = kernels.eta_sampler()?;
        let prop = Propagator::new(sys, grid, Scheme::ExpMidpoint);
        let xi = kernels.xi_sampler()?.sample_at(mix(seed, &[domain::XI, 2]), 0);
        let est = unravel_with_sampler(&prop, &xi, &eta_sampler, 200, mix(seed, &[domain::ETA_FIRST]))?;
        let finite = est.mean.iter().all(|z| z.re.is_finite() && z.im.is_finite());
        let norm0 = normalize(&est.mean.row(0).to_owned()).is_ok();
        checks.push(CheckResult::of(
            "linear_unraveling_runs",
            finite && norm0 && est.samples == 200,
            format!("{} auxiliary draws averaged", est.samples),
        ));
    }

    Ok(checks)
}
