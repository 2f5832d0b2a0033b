//! Cross-module consistency checks at desk scale: the dephasing formula
//! against a brute-force superoperator product integral, the driving-noise
//! average against the exact density matrix, the cooked-measure martingale
//! and the nonlinear/reweighted distributional agreement.

use ndarray::{array, Array1, Array2};
use num_complex::Complex64;

use nmsse::fields::FieldRealization;
use nmsse::kernels::{JPolicy, KernelSet, KernelSpec};
use nmsse::linear::{unravel_with_sampler, Propagator, Scheme};
use nmsse::nonlinear::{
    nonlinear_observable_samples, weighted_linear_states, InnerMode, LinearSolverMode,
};
use nmsse::oracle::{CommutingModel, CommutingOracle};
use nmsse::rng::{domain, mix};
use nmsse::stats;
use nmsse::system::SystemSpec;
use nmsse::TimeGrid;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn uniform3() -> Array1<Complex64> {
    let a = 1.0 / 3.0f64.sqrt();
    array![c(a, 0.0), c(a, 0.0), c(a, 0.0)]
}

fn example_model() -> CommutingModel {
    CommutingModel::exponential(array![1.0, 0.0, -1.0], uniform3(), 1.0).unwrap()
}

fn example_system() -> SystemSpec {
    SystemSpec::diagonal(&[1.0, 0.0, -1.0], uniform3()).unwrap()
}

fn example_kernels(grid: &TimeGrid) -> KernelSet {
    KernelSet::build(&KernelSpec::exponential(1.0), grid, JPolicy::RealField).unwrap()
}

fn kron(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Array2<Complex64> {
    let (ra, ca) = a.dim();
    let (rb, cb) = b.dim();
    let mut out = Array2::<Complex64>::zeros((ra * rb, ca * cb));
    for i in 0..ra {
        for j in 0..ca {
            for k in 0..rb {
                for l in 0..cb {
                    out[(i * rb + k, j * cb + l)] = a[(i, j)] * b[(k, l)];
                }
            }
        }
    }
    out
}

/// The dephasing formula must agree with a stepwise product integral of the
/// full superoperator exponent built from quadrature, at small M.
#[test]
fn dephasing_formula_matches_superoperator_product_integral() {
    let grid = TimeGrid::with_nodes(0.05, 21).unwrap();
    let m = grid.len();
    let model = example_model();
    let oracle = CommutingOracle::new(&model, &grid);

    // Independent quadrature of Λ(t_v) and Θ(t_v) over the sampled kernel.
    let kernel = |a: usize, b: usize| (-(grid.node(a) - grid.node(b)).abs()).exp();
    let mut lambda = vec![0.0f64; m];
    let mut theta = vec![0.0f64; m];
    for v in 1..m {
        let w = grid.trapezoid_weights(v);
        for a in 0..=v {
            for b in 0..=v {
                let contrib = w[a] * w[b] * kernel(a, b);
                lambda[v] += contrib;
                theta[v] += match a.cmp(&b) {
                    std::cmp::Ordering::Greater => contrib,
                    std::cmp::Ordering::Equal => 0.5 * contrib,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }

    // Superoperator exponent in row-major vectorization:
    //   Q(t) = Λ A⊗Aᵀ - Θ A²⊗I - (Λ-Θ) I⊗(A²)ᵀ
    let d = 3usize;
    let a_op = {
        let mut a = Array2::<Complex64>::zeros((d, d));
        for (j, &v) in [1.0, 0.0, -1.0].iter().enumerate() {
            a[(j, j)] = c(v, 0.0);
        }
        a
    };
    let a_sq = a_op.dot(&a_op);
    let eye = Array2::from_diag(&Array1::from_elem(d, c(1.0, 0.0)));
    let lr = kron(&a_op, &a_op.t().to_owned());
    let ll = kron(&a_sq, &eye);
    let rr = kron(&eye, &a_sq.t().to_owned());
    let q_at = |v: usize| -> Array2<Complex64> {
        let mut q = Array2::<Complex64>::zeros((d * d, d * d));
        q.zip_mut_with(&lr, |z, x| *z += c(lambda[v], 0.0) * x);
        q.zip_mut_with(&ll, |z, x| *z -= c(theta[v], 0.0) * x);
        q.zip_mut_with(&rr, |z, x| *z -= c(lambda[v] - theta[v], 0.0) * x);
        q
    };

    // Stepwise product integral of the exactly commuting family.
    let psi0 = uniform3();
    let mut rho_vec = Array1::<Complex64>::zeros(d * d);
    for j in 0..d {
        for k in 0..d {
            rho_vec[j * d + k] = psi0[j] * psi0[k].conj();
        }
    }
    for v in 0..m - 1 {
        let dq = &q_at(v + 1) - &q_at(v);
        rho_vec = nmsse::linalg::expm(&dq).dot(&rho_vec);
    }

    for v in [m - 1] {
        let rho_formula = oracle.dephasing_density(v).unwrap();
        for j in 0..d {
            for k in 0..d {
                let dev = (rho_vec[j * d + k] - rho_formula[(j, k)]).norm();
                assert!(
                    dev < 1e-12,
                    "entry ({j},{k}): product integral {} vs formula {}",
                    rho_vec[j * d + k],
                    rho_formula[(j, k)]
                );
            }
        }
    }
    // The two independent quadratures must agree as well.
    assert!((lambda[m - 1] - oracle.lambda(m - 1).re).abs() < 1e-12);
}

/// Averaging the exact projectors over the driving noise reproduces the
/// dephasing density matrix (the unraveling condition, end to end).
#[test]
fn xi_average_of_exact_projectors_matches_dephasing() {
    let grid = TimeGrid::new(1.0, 0.01).unwrap();
    let node = grid.len() - 1;
    let kernels = example_kernels(&grid);
    let oracle = CommutingOracle::new(&example_model(), &grid);

    let draws = 10_000usize;
    let xi_fields = kernels.xi_sampler().unwrap().sample(mix(41, &[domain::XI]), draws);
    let d = 3usize;
    let mut sum = Array2::<Complex64>::zeros((d, d));
    let mut sum_sq = Array2::<f64>::zeros((d, d));
    for xi in &xi_fields {
        let psi = oracle.linear_state(xi, node).unwrap();
        for j in 0..d {
            for k in 0..d {
                let p = psi[j] * psi[k].conj();
                sum[(j, k)] += p;
                sum_sq[(j, k)] += p.norm_sqr();
            }
        }
    }
    let n = draws as f64;
    let mean = sum.mapv(|z| z / n);
    let rho = oracle.dephasing_density(node).unwrap();
    for j in 0..d {
        for k in 0..d {
            let stderr = stats::stderr_of_mean(sum_sq[(j, k)] / n, mean[(j, k)].norm_sqr(), n);
            let dev = (mean[(j, k)] - rho[(j, k)]).norm();
            assert!(
                dev <= 5.0 * stderr.max(1e-12),
                "entry ({j},{k}): dev {dev} vs stderr {stderr}"
            );
        }
    }
}

/// Trace preservation as a statistical martingale: E‖ψ̂_ξ(t)‖² = 1 where
/// ψ̂_ξ is the auxiliary-noise estimate of the linear state.
#[test]
fn norm_martingale_over_joint_samples() {
    let grid = TimeGrid::new(1.0, 0.02).unwrap();
    let node = grid.len() - 1;
    let sys = example_system();
    let kernels = example_kernels(&grid);
    let xi_sampler = kernels.xi_sampler().unwrap();
    let eta_sampler = kernels.eta_sampler().unwrap();
    let prop = Propagator::new(&sys, &grid, Scheme::ExpMidpoint);

    let n_xi = 200usize;
    let n_eta = 200usize;
    let seed = 57u64;
    let xi_fields = xi_sampler.sample(mix(seed, &[domain::XI]), n_xi);
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for (i, xi) in xi_fields.iter().enumerate() {
        let est = unravel_with_sampler(
            &prop,
            xi,
            &eta_sampler,
            n_eta,
            mix(seed, &[domain::ETA_FIRST, i as u64]),
        )
        .unwrap();
        let norm_sq: f64 = est.mean.row(node).iter().map(|z| z.norm_sqr()).sum();
        sum += norm_sq;
        sum_sq += norm_sq * norm_sq;
    }
    let n = n_xi as f64;
    let mean = sum / n;
    let stderr = stats::stderr_of_mean(sum_sq / n, mean * mean, n);
    assert!(
        (mean - 1.0).abs() <= 5.0 * stderr,
        "mean norm² = {mean} ± {stderr}"
    );
}

/// The nonlinear sampler and cooked-measure reweighting draw from the same
/// single-time distributions at every tested node, not just the endpoints.
#[test]
fn single_time_distributions_agree_at_interior_nodes() {
    let grid = TimeGrid::new(1.0, 0.02).unwrap();
    let sys = example_system();
    let kernels = example_kernels(&grid);
    let nodes = [10usize, 25, 40, 50];
    let observable = |psi: &Array1<Complex64>| {
        psi.iter()
            .zip([1.0, 0.0, -1.0])
            .map(|(z, a)| a * z.norm_sqr())
            .sum::<f64>()
    };

    let nonlinear = nonlinear_observable_samples(
        &sys,
        &kernels,
        &observable,
        &nodes,
        400,
        InnerMode::Oracle,
        71,
        Scheme::ExpMidpoint,
    )
    .unwrap();

    let ensemble = weighted_linear_states(
        &sys,
        &kernels,
        &nodes,
        20_000,
        LinearSolverMode::Oracle,
        72,
        Scheme::ExpMidpoint,
    )
    .unwrap();

    for (which, &node) in nodes.iter().enumerate() {
        let a_samples = &nonlinear[which];
        let weighted = &ensemble.per_node[which];
        let values: Vec<f64> = weighted.iter().map(|s| observable(&s.state)).collect();
        let weights: Vec<f64> = weighted.iter().map(|s| s.weight).collect();
        let ks = stats::ks_statistic(a_samples, &values, Some(&weights));
        let critical = stats::ks_critical_1pct(
            a_samples.len() as f64,
            stats::effective_sample_size(&weights),
        );
        assert!(
            ks < critical,
            "node {node}: KS {ks:.4} vs 1% critical {critical:.4}"
        );
    }
}

/// The aggregated invariant suite is green on the worked example.
#[test]
fn validation_suite_is_green() {
    let grid = TimeGrid::new(1.0, 0.02).unwrap();
    let sys = example_system();
    let kernels = example_kernels(&grid);
    let checks = nmsse::validate::run_all(&sys, &kernels, 2026).unwrap();
    let mut all_ok = true;
    for check in &checks {
        if !check.passed {
            all_ok = false;
        }
        println!(
            "{} {}: {}",
            if check.passed { "ok  " } else { "FAIL" },
            check.name,
            check.detail
        );
    }
    assert!(all_ok);
}

/// A fixed driving field can be exported, re-imported and reused: the
/// trajectory estimate is byte-identical across the round trip.
#[test]
fn shared_xi_roundtrip_reproduces_estimates() {
    let grid = TimeGrid::new(0.5, 0.05).unwrap();
    let sys = example_system();
    let kernels = example_kernels(&grid);
    let xi = kernels.xi_sampler().unwrap().sample_at(5, 2);

    let mut buf = Vec::new();
    nmsse::io::write_field_csv(&mut buf, &xi).unwrap();
    let xi_back = nmsse::io::read_field_csv(buf.as_slice()).unwrap();
    assert_eq!(xi, xi_back);

    let eta_sampler = kernels.eta_sampler().unwrap();
    let prop = Propagator::new(&sys, &grid, Scheme::ExpMidpoint);
    let a = unravel_with_sampler(&prop, &xi, &eta_sampler, 64, 9).unwrap();
    let b = unravel_with_sampler(&prop, &xi_back, &eta_sampler, 64, 9).unwrap();
    let mut csv_a = Vec::new();
    let mut csv_b = Vec::new();
    nmsse::io::write_estimate_csv(&mut csv_a, &a).unwrap();
    nmsse::io::write_estimate_csv(&mut csv_b, &b).unwrap();
    assert_eq!(csv_a, csv_b);
}

/// Estimates are independent of the rayon worker count: partial sums are
/// chunked and merged in index order, and every draw owns its stream.
#[test]
fn results_do_not_depend_on_worker_count() {
    let grid = TimeGrid::new(0.5, 0.05).unwrap();
    let sys = example_system();
    let kernels = example_kernels(&grid);
    let xi = kernels.xi_sampler().unwrap().sample_at(3, 0);
    let eta_sampler = kernels.eta_sampler().unwrap();

    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            let prop = Propagator::new(&sys, &grid, Scheme::ExpMidpoint);
            let est = unravel_with_sampler(&prop, &xi, &eta_sampler, 300, 13).unwrap();
            let rho = nmsse::linear::density_matrix(
                &sys,
                &kernels,
                16,
                16,
                grid.len() - 1,
                13,
                Scheme::ExpMidpoint,
            )
            .unwrap();
            (est.mean, est.stderr, rho.rho)
        })
    };
    let single = run(1);
    let several = run(4);
    assert_eq!(single.0, several.0);
    assert_eq!(single.1, several.1);
    assert_eq!(single.2, several.2);
}

/// Euler on the driven equation loses norm at O(dt) while the midpoint
/// scheme conserves it; both see the same fields.
#[test]
fn euler_is_first_order_against_midpoint_reference() {
    let sys = example_system();
    let field = |g: &TimeGrid| FieldRealization::from_fn(1, g, |_, t| c(0.5 * (2.0 * t).cos(), 0.0));
    let endpoint = |dt: f64, scheme: Scheme| {
        let g = TimeGrid::new(1.0, dt).unwrap();
        let xi = field(&g);
        let eta = FieldRealization::zeros(1, g.len());
        nmsse::propagate_time_local(&sys, &xi, &eta, &g, scheme)
            .unwrap()
            .state(g.len() - 1)
    };
    let err = |dt: f64| {
        let eu = endpoint(dt, Scheme::Euler);
        let em = endpoint(dt, Scheme::ExpMidpoint);
        eu.iter()
            .zip(em.iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt()
    };
    let ratio = err(0.005) / err(0.01);
    assert!(
        (0.35..0.75).contains(&ratio),
        "Euler deviation should halve with dt, ratio {ratio}"
    );
}
