//! Mode implementations. Every mode writes its data files plus a
//! deterministic `manifest.json` (config hash, seed, versions, summary
//! numbers); wall-clock details go to `run_meta.json` so the payloads stay
//! byte-identical across reruns.

use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::Array1;
use num_complex::Complex64;
use serde_json::json;

use nmsse::fields::{characteristic_check, covariance_report, FieldRealization};
use nmsse::io;
use nmsse::linear::{density_matrix, unravel_with_sampler, Propagator};
use nmsse::nonlinear::{weighted_linear_states, NonlinearSampler};
use nmsse::oracle::CommutingOracle;
use nmsse::rng::{domain, mix, rng_for};
use nmsse::stats::{self, Histogram};

use crate::config::{ExperimentConfig, Resolved, Summary};
use crate::CliError;

pub fn numerical(e: nmsse::Error) -> CliError {
    CliError::Numerical(e.to_string())
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(dir.join(name), bytes)
        .map_err(|e| CliError::Config(format!("cannot write {name}: {e}")))
}

fn observable_first_coupling(sys: &nmsse::SystemSpec) -> impl Fn(&Array1<Complex64>) -> f64 + Sync + '_ {
    let op = &sys.coupling()[0];
    move |psi: &Array1<Complex64>| {
        let a_psi = op.dot(psi);
        psi.iter()
            .zip(a_psi.iter())
            .map(|(p, q)| (p.conj() * q).re)
            .sum()
    }
}

/// The commuting-class oracle applies when the system is a single diagonal
/// coupling with isotropic (S = 0) real symmetric noise.
fn oracle_if_applicable(resolved: &Resolved) -> Option<CommutingOracle> {
    let sys = &resolved.sys;
    if !(sys.is_diagonal() && sys.channels() == 1) {
        return None;
    }
    let s_scale = resolved
        .kernels
        .relation()
        .values()
        .iter()
        .fold(0.0f64, |acc, z| acc.max(z.norm()));
    if s_scale > 0.0 {
        return None;
    }
    let diag = Array1::from_iter((0..sys.dim()).map(|j| sys.coupling()[0][(j, j)].re));
    CommutingOracle::from_discretized(
        diag,
        sys.psi0().clone(),
        resolved.kernels.correlation(),
        &resolved.grid,
    )
    .ok()
}

fn fixed_xi(resolved: &Resolved, seed: u64) -> Result<FieldRealization, CliError> {
    match &resolved.xi_import {
        Some(field) => Ok(field.clone()),
        None => {
            let sampler = resolved.kernels.xi_sampler().map_err(numerical)?;
            Ok(sampler.sample_at(mix(seed, &[domain::XI]), 0))
        }
    }
}

pub struct RunOutcome {
    pub summary: Summary,
    /// Failed statistical checks (validate / covariance-check modes).
    pub failures: Vec<String>,
}

pub fn run_mode(
    mode: &str,
    config: &ExperimentConfig,
    resolved: &Resolved,
) -> Result<RunOutcome, CliError> {
    let started = Instant::now();
    fs::create_dir_all(&resolved.out_dir)
        .map_err(|e| CliError::Config(format!("cannot create output dir: {e}")))?;

    let outcome = match mode {
        "linear-traj" => linear_traj(config, resolved),
        "nonlinear-traj" => nonlinear_traj(config, resolved),
        "density" => density(config, resolved),
        "histogram" => histogram(config, resolved),
        "validate" => validate(config, resolved),
        "covariance-check" => covariance(config, resolved),
        other => Err(CliError::Config(format!("unknown mode {other:?}"))),
    }?;

    let manifest = json!({
        "mode": mode,
        "seed": config.run.seed,
        "config_hash": resolved.config_hash,
        "versions": {
            "nmsse": env!("CARGO_PKG_VERSION"),
            "nmsse-cli": env!("CARGO_PKG_VERSION"),
        },
        "summary": outcome.summary,
    });
    write_file(
        &resolved.out_dir,
        "manifest.json",
        serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::Config(e.to_string()))?
            .as_bytes(),
    )?;

    let meta = json!({
        "unix_time": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        "wall_seconds": started.elapsed().as_secs_f64(),
        "threads": rayon::current_num_threads(),
    });
    write_file(
        &resolved.out_dir,
        "run_meta.json",
        serde_json::to_string_pretty(&meta)
            .map_err(|e| CliError::Config(e.to_string()))?
            .as_bytes(),
    )?;

    Ok(outcome)
}

fn linear_traj(config: &ExperimentConfig, resolved: &Resolved) -> Result<RunOutcome, CliError> {
    let seed = config.run.seed;
    let xi = fixed_xi(resolved, seed)?;
    let mut buf = Vec::new();
    io::write_field_csv(&mut buf, &xi).map_err(numerical)?;
    write_file(&resolved.out_dir, "xi.csv", &buf)?;

    let eta_sampler = resolved.kernels.eta_sampler().map_err(numerical)?;
    let prop = Propagator::new(&resolved.sys, &resolved.grid, resolved.scheme);
    let est = unravel_with_sampler(
        &prop,
        &xi,
        &eta_sampler,
        config.run.n_eta,
        mix(seed, &[domain::ETA_FIRST]),
    )
    .map_err(numerical)?;
    let mut buf = Vec::new();
    io::write_estimate_csv(&mut buf, &est).map_err(numerical)?;
    write_file(&resolved.out_dir, "linear_mc.csv", &buf)?;

    let mut summary = Summary::new();
    summary.insert("n_eta".into(), json!(est.samples));
    let last = resolved.grid.len() - 1;
    let max_stderr = est.stderr.iter().copied().fold(0.0f64, f64::max);
    summary.insert("max_stderr".into(), json!(max_stderr));

    if let Some(oracle) = oracle_if_applicable(resolved) {
        let exact = oracle.linear_trajectory(&xi).map_err(numerical)?;
        let mut buf = Vec::new();
        io::write_trajectory_csv(&mut buf, &exact).map_err(numerical)?;
        write_file(&resolved.out_dir, "linear_exact.csv", &buf)?;

        let mut worst = 0.0f64;
        for node in 1..resolved.grid.len() {
            for j in 0..resolved.sys.dim() {
                let dev = (est.mean[(node, j)] - exact.states[(node, j)]).norm();
                let se = est.stderr[(node, j)];
                if se > 0.0 {
                    worst = worst.max(dev / se);
                }
            }
        }
        summary.insert("worst_deviation_sigma".into(), json!(worst));
    }
    summary.insert(
        "final_norm_sq".into(),
        json!(est.mean.row(last).iter().map(|z| z.norm_sqr()).sum::<f64>()),
    );
    Ok(RunOutcome {
        summary,
        failures: Vec::new(),
    })
}

fn nonlinear_traj(config: &ExperimentConfig, resolved: &Resolved) -> Result<RunOutcome, CliError> {
    let seed = config.run.seed;
    let xi = fixed_xi(resolved, seed)?;
    let mut buf = Vec::new();
    io::write_field_csv(&mut buf, &xi).map_err(numerical)?;
    write_file(&resolved.out_dir, "xi.csv", &buf)?;

    let sampler = NonlinearSampler::new(&resolved.sys, &resolved.kernels, resolved.inner, resolved.scheme)
        .map_err(numerical)?;
    let result = sampler
        .trajectory(&xi, mix(seed, &[domain::INNER]))
        .map_err(numerical)?;
    let mut buf = Vec::new();
    io::write_trajectory_csv(&mut buf, &result.trajectory).map_err(numerical)?;
    write_file(&resolved.out_dir, "nonlinear.csv", &buf)?;

    let mut summary = Summary::new();
    summary.insert("max_im_expectation".into(), json!(result.max_im_expectation));
    if let Some(stderr) = &result.endpoint_stderr {
        summary.insert(
            "endpoint_inner_stderr_max".into(),
            json!(stderr.iter().copied().fold(0.0f64, f64::max)),
        );
    }
    let worst_norm = (0..resolved.grid.len())
        .map(|node| {
            (result
                .trajectory
                .state(node)
                .iter()
                .map(|z| z.norm_sqr())
                .sum::<f64>()
                - 1.0)
                .abs()
        })
        .fold(0.0f64, f64::max);
    summary.insert("max_norm_drift".into(), json!(worst_norm));
    Ok(RunOutcome {
        summary,
        failures: Vec::new(),
    })
}

fn density(config: &ExperimentConfig, resolved: &Resolved) -> Result<RunOutcome, CliError> {
    let seed = config.run.seed;
    let mut summary = Summary::new();
    let oracle = oracle_if_applicable(resolved);
    for &node in &resolved.snapshots {
        let t = resolved.grid.node(node);
        let est = density_matrix(
            &resolved.sys,
            &resolved.kernels,
            config.run.n_xi,
            config.run.n_eta,
            node,
            mix(seed, &[node as u64]),
            resolved.scheme,
        )
        .map_err(numerical)?;

        let mut rows = String::from("j,k,re,im,stderr\n");
        for j in 0..resolved.sys.dim() {
            for k in 0..resolved.sys.dim() {
                rows.push_str(&format!(
                    "{j},{k},{},{},{}\n",
                    io::fmt_f64(est.rho[(j, k)].re),
                    io::fmt_f64(est.rho[(j, k)].im),
                    io::fmt_f64(est.stderr_entries[(j, k)])
                ));
            }
        }
        write_file(&resolved.out_dir, &format!("density_t{t:.3}.csv"), rows.as_bytes())?;

        let trace: Complex64 = (0..resolved.sys.dim()).map(|j| est.rho[(j, j)]).sum();
        let mut entry = Summary::new();
        entry.insert("stderr_max".into(), json!(est.stderr));
        entry.insert("herm_residual".into(), json!(est.herm_residual));
        entry.insert("trace_re".into(), json!(trace.re));
        entry.insert(
            "min_eigenvalue".into(),
            json!(nmsse::linalg::hermitian_min_eig(&est.rho)),
        );
        if let Some(oracle) = &oracle {
            let exact = oracle.dephasing_density(node).map_err(numerical)?;
            let mut worst = 0.0f64;
            for j in 0..resolved.sys.dim() {
                for k in 0..resolved.sys.dim() {
                    let dev = (est.rho[(j, k)] - exact[(j, k)]).norm();
                    let se = est.stderr_entries[(j, k)];
                    if se > 0.0 {
                        worst = worst.max(dev / se);
                    }
                }
            }
            entry.insert("worst_deviation_sigma".into(), json!(worst));
        }
        summary.insert(format!("t_{t:.3}"), json!(entry));
    }
    Ok(RunOutcome {
        summary,
        failures: Vec::new(),
    })
}

fn histogram(config: &ExperimentConfig, resolved: &Resolved) -> Result<RunOutcome, CliError> {
    let seed = config.run.seed;
    let observable = observable_first_coupling(&resolved.sys);

    let nonlinear = nmsse::nonlinear::nonlinear_observable_samples(
        &resolved.sys,
        &resolved.kernels,
        &observable,
        &resolved.snapshots,
        config.run.n_xi,
        resolved.inner,
        seed,
        resolved.scheme,
    )
    .map_err(numerical)?;

    let ensemble = weighted_linear_states(
        &resolved.sys,
        &resolved.kernels,
        &resolved.snapshots,
        config.run.n_reweighted,
        resolved.linear_solver,
        mix(seed, &[1]),
        resolved.scheme,
    )
    .map_err(numerical)?;

    let mut summary = Summary::new();
    summary.insert("skipped_reweighted".into(), json!(ensemble.skipped));
    for (which, &node) in resolved.snapshots.iter().enumerate() {
        let t = resolved.grid.node(node);
        let weighted = &ensemble.per_node[which];
        let values: Vec<f64> = weighted.iter().map(|s| observable(&s.state)).collect();
        let weights: Vec<f64> = weighted.iter().map(|s| s.weight).collect();

        let range = stats::observed_range(&[&nonlinear[which], &values]);
        let hist_nl = Histogram::new(&nonlinear[which], None, 50, range);
        let hist_rw = Histogram::new(&values, Some(&weights), 50, range);
        let mut buf = Vec::new();
        io::write_histogram_csv(&mut buf, &hist_nl).map_err(numerical)?;
        write_file(&resolved.out_dir, &format!("hist_nonlinear_t{t:.3}.csv"), &buf)?;
        let mut buf = Vec::new();
        io::write_histogram_csv(&mut buf, &hist_rw).map_err(numerical)?;
        write_file(&resolved.out_dir, &format!("hist_reweighted_t{t:.3}.csv"), &buf)?;

        let ks = stats::ks_statistic(&nonlinear[which], &values, Some(&weights));
        let ess = stats::effective_sample_size(&weights);
        let critical = stats::ks_critical_1pct(nonlinear[which].len() as f64, ess);
        let mean_weight = weights.iter().sum::<f64>() / ensemble.samples as f64;
        let mut entry = Summary::new();
        entry.insert("ks_statistic".into(), json!(ks));
        entry.insert("ks_critical_1pct".into(), json!(critical));
        entry.insert("effective_reweighted_samples".into(), json!(ess));
        entry.insert("mean_weight".into(), json!(mean_weight));
        summary.insert(format!("t_{t:.3}"), json!(entry));
    }
    Ok(RunOutcome {
        summary,
        failures: Vec::new(),
    })
}

fn validate(config: &ExperimentConfig, resolved: &Resolved) -> Result<RunOutcome, CliError> {
    let checks = nmsse::validate::run_all(&resolved.sys, &resolved.kernels, config.run.seed)
        .map_err(numerical)?;
    let mut failures = Vec::new();
    let mut listed = Vec::new();
    for check in &checks {
        println!(
            "{} {}: {}",
            if check.passed { "ok  " } else { "FAIL" },
            check.name,
            check.detail
        );
        listed.push(json!({
            "name": check.name,
            "passed": check.passed,
            "detail": check.detail,
        }));
        if !check.passed {
            failures.push(check.name.to_string());
        }
    }
    write_file(
        &resolved.out_dir,
        "validation.json",
        serde_json::to_string_pretty(&json!({ "checks": listed }))
            .map_err(|e| CliError::Config(e.to_string()))?
            .as_bytes(),
    )?;
    let mut summary = Summary::new();
    summary.insert("checks".into(), json!(checks.len()));
    summary.insert("failures".into(), json!(failures.len()));
    Ok(RunOutcome { summary, failures })
}

fn covariance(config: &ExperimentConfig, resolved: &Resolved) -> Result<RunOutcome, CliError> {
    let seed = config.run.seed;
    let draws = config.run.n_eta.max(1000);

    for (name, kernel) in [
        ("kernel_d.csv", resolved.kernels.correlation()),
        ("kernel_s.csv", resolved.kernels.relation()),
        ("kernel_k.csv", resolved.kernels.gamma().auxiliary()),
        ("kernel_j.csv", resolved.kernels.gamma().free()),
    ] {
        let mut buf = Vec::new();
        io::write_kernel_csv(&mut buf, kernel).map_err(numerical)?;
        write_file(&resolved.out_dir, name, &buf)?;
    }

    let mut summary = Summary::new();
    let mut failures = Vec::new();
    summary.insert("draws".into(), json!(draws));
    summary.insert(
        "gamma_min_eigenvalue".into(),
        json!(resolved.kernels.gamma().min_eig()),
    );

    for (label, sampler_res, corr, rel) in [
        (
            "xi",
            resolved.kernels.xi_sampler(),
            resolved.kernels.correlation().values().clone(),
            resolved.kernels.relation().values().clone(),
        ),
        (
            "eta",
            resolved.kernels.eta_sampler(),
            resolved.kernels.gamma().free().values().clone(),
            resolved.kernels.gamma().auxiliary().values().clone(),
        ),
    ] {
        let sampler = sampler_res.map_err(numerical)?;
        let report = covariance_report(
            &sampler,
            &corr,
            &rel,
            draws,
            mix(seed, &[domain::TEST_VECTORS, label.len() as u64]),
        )
        .map_err(numerical)?;
        let mut entry = Summary::new();
        entry.insert("max_corr_sigma".into(), json!(report.max_corr_sigma));
        entry.insert("max_rel_sigma".into(), json!(report.max_rel_sigma));
        entry.insert("clipped_eigenvalues".into(), json!(sampler.clip_report().clipped));
        summary.insert(format!("{label}_sampler"), json!(entry));
        if report.max_corr_sigma > 6.0 || report.max_rel_sigma > 6.0 {
            failures.push(format!("{label}_sampler covariance"));
        }
    }

    // Characteristic-function identity over seeded test vectors.
    let sampler = resolved.kernels.xi_sampler().map_err(numerical)?;
    let (n, m) = (resolved.kernels.channels(), resolved.grid.len());
    let mut worst = 0.0f64;
    for vec_idx in 0..20u64 {
        let mut rng = rng_for(seed, &[domain::TEST_VECTORS, vec_idx]);
        let mut random_vector = || {
            ndarray::Array2::from_shape_fn((n, m), |_| {
                use rand::Rng;
                Complex64::new(
                    0.2 * (rng.random::<f64>() - 0.5),
                    0.2 * (rng.random::<f64>() - 0.5),
                )
            })
        };
        let a = random_vector();
        let b = random_vector();
        let check = characteristic_check(
            &sampler,
            &a,
            &b,
            resolved.grid.dt(),
            draws,
            mix(seed, &[2, vec_idx]),
        )
        .map_err(numerical)?;
        let dev = (check.empirical - check.analytic).norm();
        if check.stderr > 0.0 {
            worst = worst.max(dev / check.stderr);
        } else if dev > 1e-12 {
            worst = f64::INFINITY;
        }
    }
    summary.insert("characteristic_worst_sigma".into(), json!(worst));
    if worst > 6.0 {
        failures.push("characteristic identity".into());
    }

    Ok(RunOutcome { summary, failures })
}
