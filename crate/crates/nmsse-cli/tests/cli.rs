//! End-to-end runs of the binary: exit codes, unknown-key rejection and
//! byte-identical reruns.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nmsse"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_small_config(dir: &Path, seed: u64) -> std::path::PathBuf {
    let path = dir.join("exp.toml");
    fs::write(
        &path,
        format!(
            r#"
[grid]
t_max = 0.4
dt = 0.01

[run]
n_xi = 64
n_eta = 64
n_reweighted = 500
snapshots = [0.2, 0.4]
seed = {seed}

[output]
dir = "out"
"#
        ),
    )
    .unwrap();
    path
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_small_config(tmp.path(), 99);
    let config = config.to_str().unwrap();

    let first = run_in(tmp.path(), &["linear-traj", "--config", config, "--out-dir", "a"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let second = run_in(tmp.path(), &["linear-traj", "--config", config, "--out-dir", "b"]);
    assert!(second.status.success());

    for name in ["xi.csv", "linear_mc.csv", "linear_exact.csv", "manifest.json"] {
        let a = fs::read(tmp.path().join("a").join(name)).unwrap();
        let b = fs::read(tmp.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between reruns");
    }
}

#[test]
fn different_seeds_differ() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_small_config(tmp.path(), 1);
    let config = config.to_str().unwrap();
    let first = run_in(
        tmp.path(),
        &["linear-traj", "--config", config, "--out-dir", "a", "--seed", "1"],
    );
    assert!(first.status.success());
    let second = run_in(
        tmp.path(),
        &["linear-traj", "--config", config, "--out-dir", "b", "--seed", "2"],
    );
    assert!(second.status.success());
    let a = fs::read(tmp.path().join("a/xi.csv")).unwrap();
    let b = fs::read(tmp.path().join("b/xi.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn unknown_keys_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "[grid]\nt_max = 1.0\ndt = 0.01\nstep_count = 5\n").unwrap();
    let out = run_in(tmp.path(), &["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("configuration error"), "{stderr}");
}

#[test]
fn invalid_values_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "[grid]\nt_max = 1.0\ndt = -0.01\n").unwrap();
    let out = run_in(tmp.path(), &["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let path = tmp.path().join("bad2.toml");
    fs::write(&path, "[run]\nscheme = \"rk4\"\n").unwrap();
    let out = run_in(tmp.path(), &["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let path = tmp.path().join("bad3.toml");
    fs::write(
        &path,
        "[kernel]\nname = \"from_coupling\"\ncoupling_csv = \"missing.csv\"\n",
    )
    .unwrap();
    let out = run_in(tmp.path(), &["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn inadmissible_kernel_pairs_are_numerical_failures() {
    // S = 2D makes K = D - S negative definite: no real auxiliary field
    // exists and the run must stop with the numerical exit code.
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad_pair.toml");
    fs::write(
        &path,
        "[kernel]\nrelation = \"scaled\"\nrelation_scale = 2.0\n\n[grid]\nt_max = 0.4\ndt = 0.01\n",
    )
    .unwrap();
    let out = run_in(
        tmp.path(),
        &["linear-traj", "--config", path.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("numerical failure"), "{stderr}");
}

#[test]
fn validate_mode_passes_on_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_small_config(tmp.path(), 5);
    let out = run_in(
        tmp.path(),
        &["validate", "--config", config.to_str().unwrap()],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("cooked_weight_martingale"), "{stdout}");
    assert!(!stdout.contains("FAIL"), "{stdout}");
    assert!(tmp.path().join("out/validation.json").exists());
}

#[test]
fn validate_passes_with_decoupled_system() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("zero.toml");
    fs::write(
        &path,
        r#"
[system]
a_diag = [[0.0, 0.0, 0.0]]

[grid]
t_max = 0.4
dt = 0.01

[run]
n_xi = 32
n_eta = 32
seed = 3
"#,
    )
    .unwrap();
    let out = run_in(tmp.path(), &["validate", "--config", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // A decoupled system also keeps the trajectory constant.
    let out = run_in(
        tmp.path(),
        &["linear-traj", "--config", path.to_str().unwrap(), "--out-dir", "zero_out"],
    );
    assert!(out.status.success());
    let csv = fs::read_to_string(tmp.path().join("zero_out/linear_mc.csv")).unwrap();
    let mut lines = csv.lines().skip(1);
    let first = lines.next().unwrap().split(',').skip(1).collect::<Vec<_>>();
    for line in lines {
        let row = line.split(',').skip(1).collect::<Vec<_>>();
        assert_eq!(first, row);
    }
}

#[test]
fn histogram_mode_reports_ks_below_critical() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_small_config(tmp.path(), 13);
    let out = run_in(
        tmp.path(),
        &["histogram", "--config", config.to_str().unwrap()],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("out/manifest.json")).unwrap())
            .unwrap();
    for t in ["t_0.200", "t_0.400"] {
        let entry = &manifest["summary"][t];
        let ks = entry["ks_statistic"].as_f64().unwrap();
        let critical = entry["ks_critical_1pct"].as_f64().unwrap();
        assert!(ks < critical, "{t}: KS {ks} vs {critical}");
    }
    assert!(tmp.path().join("out/hist_nonlinear_t0.200.csv").exists());
    assert!(tmp.path().join("out/hist_reweighted_t0.400.csv").exists());
}

#[test]
fn fixed_xi_can_be_shared_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_small_config(tmp.path(), 21);
    let config = config.to_str().unwrap();
    let first = run_in(tmp.path(), &["linear-traj", "--config", config, "--out-dir", "a"]);
    assert!(first.status.success());

    // Reuse the exported field in a second config; the exact trajectory
    // depends only on ξ, so it must reproduce byte for byte.
    fs::copy(tmp.path().join("a/xi.csv"), tmp.path().join("xi_shared.csv")).unwrap();
    let reuse = tmp.path().join("reuse.toml");
    fs::write(
        &reuse,
        r#"
[grid]
t_max = 0.4
dt = 0.01

[run]
n_eta = 64
seed = 4242
xi_csv = "xi_shared.csv"

[output]
dir = "c"
"#,
    )
    .unwrap();
    let second = run_in(tmp.path(), &["linear-traj", "--config", reuse.to_str().unwrap()]);
    assert!(second.status.success(), "{}", String::from_utf8_lossy(&second.stderr));
    let a = fs::read(tmp.path().join("a/linear_exact.csv")).unwrap();
    let c = fs::read(tmp.path().join("c/linear_exact.csv")).unwrap();
    assert_eq!(a, c);
}

#[test]
fn tabulated_couplings_drive_a_full_run() {
    // A coarse window of the amplitude sqrt(1/π)/sqrt(1+ω²) approximates
    // the exponential kernel; the run must build a PSD kernel and agree
    // with the exact solver it implies.
    let tmp = tempfile::tempdir().unwrap();
    let mut rows = vec!["omega,re_0_0,im_0_0".to_string()];
    let steps = 400;
    for q in 0..=steps {
        let omega = -40.0 + 80.0 * q as f64 / steps as f64;
        let amp = (1.0 / std::f64::consts::PI / (1.0 + omega * omega)).sqrt();
        rows.push(format!("{omega},{amp},0.0"));
    }
    fs::write(tmp.path().join("kappa.csv"), rows.join("\n") + "\n").unwrap();
    let path = tmp.path().join("coupling.toml");
    fs::write(
        &path,
        r#"
[kernel]
name = "from_coupling"
coupling_csv = "kappa.csv"
channels = 1
baths = 1

[grid]
t_max = 0.4
dt = 0.01

[run]
n_eta = 128
seed = 9
"#,
    )
    .unwrap();
    let out = run_in(
        tmp.path(),
        &["linear-traj", "--config", path.to_str().unwrap(), "--out-dir", "fc"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("fc/linear_exact.csv").exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let sigma_line = stdout
        .lines()
        .find(|l| l.starts_with("worst_deviation_sigma"))
        .expect("oracle comparison printed");
    let sigma: f64 = sigma_line.split(':').nth(1).unwrap().trim().parse().unwrap();
    assert!(sigma < 6.0, "{sigma_line}");
}

#[test]
fn covariance_check_exports_kernels() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_small_config(tmp.path(), 33);
    let out = run_in(
        tmp.path(),
        &["covariance-check", "--config", config.to_str().unwrap()],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["kernel_d.csv", "kernel_s.csv", "kernel_k.csv", "kernel_j.csv"] {
        let path = tmp.path().join("out").join(name);
        assert!(path.exists(), "{name} missing");
        let head = fs::read_to_string(&path).unwrap();
        assert!(head.starts_with("i,a,j,b,re,im"), "{name} header");
    }
}

#[test]
fn density_snapshots_respect_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_small_config(tmp.path(), 44);
    let out = run_in(
        tmp.path(),
        &["density", "--config", config.to_str().unwrap(), "--n-xi", "64", "--n-eta", "64"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("out/manifest.json")).unwrap())
            .unwrap();
    for t in ["t_0.200", "t_0.400"] {
        let worst = manifest["summary"][t]["worst_deviation_sigma"].as_f64().unwrap();
        assert!(worst < 6.0, "{t}: worst deviation {worst}σ");
    }
}
