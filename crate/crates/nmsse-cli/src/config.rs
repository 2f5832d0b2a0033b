//! Experiment configuration: a flat-sectioned TOML file with `key = value`
//! entries. Unknown keys are errors; omitted keys fall back to the worked
//! dephasing example (diag(1,0,-1) coupling, exponential kernel, dt = 1e-2).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use nmsse::kernels::{kernel_from_coupling, JPolicy, KernelSet, KernelSpec, QuadratureGrid};
use nmsse::linear::Scheme;
use nmsse::nonlinear::{InnerMode, LinearSolverMode};
use nmsse::system::SystemSpec;
use nmsse::{FieldRealization, TimeGrid};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub system: SystemSection,
    pub kernel: KernelSection,
    pub grid: GridSection,
    pub run: RunSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemSection {
    /// Diagonal shorthand: one row of eigenvalues per coupling channel.
    pub a_diag: Option<Vec<Vec<f64>>>,
    /// Dense operators: per channel, a d×d matrix of [re, im] pairs.
    pub a_full: Option<Vec<Vec<Vec<[f64; 2]>>>>,
    /// Diagonal Hamiltonian shorthand.
    pub h0_diag: Option<Vec<f64>>,
    /// Dense Hamiltonian.
    pub h0_full: Option<Vec<Vec<[f64; 2]>>>,
    /// Initial state as [re, im] pairs; defaults to the uniform state.
    pub psi0: Option<Vec<[f64; 2]>>,
}

impl Default for SystemSection {
    fn default() -> Self {
        Self {
            a_diag: Some(vec![vec![1.0, 0.0, -1.0]]),
            a_full: None,
            h0_diag: None,
            h0_full: None,
            psi0: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSection {
    /// exponential | single_mode | from_coupling
    pub name: String,
    pub rate: f64,
    pub omega0: f64,
    /// CSV with columns omega, re_<channel>_<bath>, im_<channel>_<bath>.
    pub coupling_csv: Option<String>,
    pub channels: usize,
    pub baths: usize,
    /// zero | scaled (S = relation_scale · D, needs real symmetric D)
    pub relation: String,
    pub relation_scale: f64,
}

impl Default for KernelSection {
    fn default() -> Self {
        Self {
            name: "exponential".into(),
            rate: 1.0,
            omega0: 1.0,
            coupling_csv: None,
            channels: 1,
            baths: 1,
            relation: "zero".into(),
            relation_scale: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub t_max: f64,
    pub dt: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { t_max: 3.0, dt: 1e-2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub n_xi: usize,
    pub n_eta: usize,
    /// Reweighted linear sample count for histogram mode.
    pub n_reweighted: usize,
    pub seed: u64,
    /// exp_midpoint | euler
    pub scheme: String,
    /// real_field | diagonal_shift
    pub j_policy: String,
    /// oracle | mc
    pub inner: String,
    /// Snapshot times for density and histogram modes.
    pub snapshots: Vec<f64>,
    /// Worker cap; 0 keeps the library default.
    pub threads: usize,
    /// Reuse a driving-field realization from CSV instead of drawing one.
    pub xi_csv: Option<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            n_xi: 1000,
            n_eta: 1000,
            n_reweighted: 100_000,
            seed: 7,
            scheme: "exp_midpoint".into(),
            j_policy: "real_field".into(),
            inner: "mc".into(),
            snapshots: vec![1.0, 3.0],
            threads: 0,
            xi_csv: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

/// Everything a mode needs, built and validated before any run starts.
pub struct Resolved {
    pub sys: SystemSpec,
    pub grid: TimeGrid,
    pub kernels: KernelSet,
    pub xi_import: Option<FieldRealization>,
    pub scheme: Scheme,
    pub inner: InnerMode,
    pub linear_solver: LinearSolverMode,
    pub snapshots: Vec<usize>,
    pub out_dir: PathBuf,
    pub config_hash: String,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    /// SHA-256 of the canonical serialized configuration. The output
    /// section is excluded: it locates the artifacts but does not affect
    /// the computation.
    pub fn hash(&self) -> String {
        let mut identity = self.clone();
        identity.output = OutputSection::default();
        let canonical = toml::to_string(&identity).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    fn build_system(&self) -> Result<SystemSpec, CliError> {
        let section = &self.system;
        let coupling: Vec<Array2<Complex64>> = match (&section.a_diag, &section.a_full) {
            (Some(_), Some(_)) => {
                return Err(config_err("system: set either a_diag or a_full, not both"))
            }
            (Some(rows), None) => {
                let dim = rows.first().map_or(0, |r| r.len());
                rows.iter()
                    .map(|row| {
                        if row.len() != dim {
                            return Err(config_err("system.a_diag rows must share one length"));
                        }
                        let mut op = Array2::<Complex64>::zeros((dim, dim));
                        for (j, &v) in row.iter().enumerate() {
                            op[(j, j)] = Complex64::new(v, 0.0);
                        }
                        Ok(op)
                    })
                    .collect::<Result<_, _>>()?
            }
            (None, Some(ops)) => ops
                .iter()
                .map(|rows| parse_matrix(rows).map_err(|e| config_err(format!("system.a_full: {e}"))))
                .collect::<Result<_, _>>()?,
            (None, None) => return Err(config_err("system: a_diag or a_full is required")),
        };
        let dim = coupling
            .first()
            .map(|op| op.nrows())
            .ok_or_else(|| config_err("system: at least one coupling operator"))?;

        let h0 = match (&section.h0_diag, &section.h0_full) {
            (Some(_), Some(_)) => {
                return Err(config_err("system: set either h0_diag or h0_full, not both"))
            }
            (Some(diag), None) => {
                if diag.len() != dim {
                    return Err(config_err("system.h0_diag length must match the dimension"));
                }
                let mut h = Array2::<Complex64>::zeros((dim, dim));
                for (j, &v) in diag.iter().enumerate() {
                    h[(j, j)] = Complex64::new(v, 0.0);
                }
                h
            }
            (None, Some(rows)) => {
                parse_matrix(rows).map_err(|e| config_err(format!("system.h0_full: {e}")))?
            }
            (None, None) => Array2::zeros((dim, dim)),
        };

        let psi0: Array1<Complex64> = match &section.psi0 {
            Some(pairs) => {
                if pairs.len() != dim {
                    return Err(config_err("system.psi0 length must match the dimension"));
                }
                Array1::from_iter(pairs.iter().map(|[re, im]| Complex64::new(*re, *im)))
            }
            None => {
                let amp = 1.0 / (dim as f64).sqrt();
                Array1::from_elem(dim, Complex64::new(amp, 0.0))
            }
        };

        SystemSpec::new(coupling, h0, psi0).map_err(|e| config_err(format!("system: {e}")))
    }

    fn build_kernels(&self, base_dir: &Path, grid: &TimeGrid) -> Result<KernelSet, CliError> {
        let section = &self.kernel;
        let policy = match self.run.j_policy.as_str() {
            "real_field" => JPolicy::RealField,
            "diagonal_shift" => JPolicy::DiagonalShift,
            other => return Err(config_err(format!("run.j_policy: unknown policy {other:?}"))),
        };
        let relation_scale = match section.relation.as_str() {
            "zero" => 0.0,
            "scaled" => section.relation_scale,
            other => return Err(config_err(format!("kernel.relation: unknown choice {other:?}"))),
        };

        let set = match section.name.as_str() {
            "exponential" => {
                if section.rate.is_nan() || section.rate <= 0.0 {
                    return Err(config_err("kernel.rate must be positive"));
                }
                let rate = section.rate;
                let spec = KernelSpec::new(section.channels, move |_, _, tau, s| {
                    Complex64::new((-rate * (tau - s).abs()).exp(), 0.0)
                })
                .with_relation(move |_, _, tau, s| {
                    Complex64::new(relation_scale * (-rate * (tau - s).abs()).exp(), 0.0)
                });
                KernelSet::build(&spec, grid, policy)
            }
            "single_mode" => {
                if relation_scale != 0.0 {
                    return Err(config_err(
                        "kernel.relation = \"scaled\" needs a real symmetric kernel; single_mode is not",
                    ));
                }
                let omega0 = section.omega0;
                let spec = KernelSpec::new(section.channels, move |_, _, tau, s| {
                    Complex64::new(0.0, -omega0 * (tau - s)).exp()
                });
                KernelSet::build(&spec, grid, policy)
            }
            "from_coupling" => {
                if relation_scale != 0.0 {
                    return Err(config_err(
                        "kernel.relation = \"scaled\" is not supported with tabulated couplings",
                    ));
                }
                let rel_path = section
                    .coupling_csv
                    .as_ref()
                    .ok_or_else(|| config_err("kernel.coupling_csv is required for from_coupling"))?;
                let path = base_dir.join(rel_path);
                let table = CouplingTable::load(&path, section.channels, section.baths)?;
                let quad = QuadratureGrid::trapezoid(table.omegas.clone())
                    .map_err(|e| config_err(format!("kernel.coupling_csv: {e}")))?;
                let correlation = kernel_from_coupling(
                    |k, ell, omega| table.lookup(k, ell, omega),
                    section.channels,
                    section.baths,
                    &quad,
                    grid,
                )
                .map_err(|e| CliError::Numerical(e.to_string()))?;
                let zero = nmsse::kernels::DiscretizedKernel::zero(
                    section.channels,
                    grid.len(),
                    nmsse::kernels::KernelKind::Relation,
                );
                let k = nmsse::kernels::build_k(&correlation, &zero)
                    .map_err(|e| CliError::Numerical(e.to_string()))?;
                let gamma = nmsse::kernels::choose_j(&k, policy)
                    .map_err(|e| CliError::Numerical(e.to_string()))?;
                return KernelSet::from_parts(*grid, correlation, zero, gamma)
                    .map_err(|e| CliError::Numerical(e.to_string()));
            }
            other => return Err(config_err(format!("kernel.name: unknown kernel {other:?}"))),
        };
        let set = set.map_err(|e| CliError::Numerical(e.to_string()))?;
        if set.correlation().is_flagged() || set.relation().is_flagged() {
            return Err(config_err(
                "kernel: sampled kernel violates its Hermiticity/symmetry invariant",
            ));
        }
        Ok(set)
    }

    pub fn resolve(&self, base_dir: &Path, needs_snapshots: bool) -> Result<Resolved, CliError> {
        let grid = TimeGrid::new(self.grid.t_max, self.grid.dt)
            .map_err(|e| config_err(format!("grid: {e}")))?;
        let sys = self.build_system()?;
        let kernels = self.build_kernels(base_dir, &grid)?;
        if sys.channels() != kernels.channels() {
            return Err(config_err(format!(
                "system has {} coupling channels but the kernel has {}",
                sys.channels(),
                kernels.channels()
            )));
        }

        let scheme = match self.run.scheme.as_str() {
            "exp_midpoint" => Scheme::ExpMidpoint,
            "euler" => Scheme::Euler,
            other => return Err(config_err(format!("run.scheme: unknown scheme {other:?}"))),
        };
        let inner = match self.run.inner.as_str() {
            "oracle" => InnerMode::Oracle,
            "mc" => InnerMode::Mc { n_eta: self.run.n_eta },
            other => return Err(config_err(format!("run.inner: unknown solver {other:?}"))),
        };
        // Reweighted estimators use exact linear solutions whenever the
        // commuting class applies (single diagonal coupling, S = 0),
        // regardless of the induction's inner solver; otherwise they fall
        // back to the auxiliary-noise average.
        let s_is_zero = kernels
            .relation()
            .values()
            .iter()
            .all(|z| z.norm() == 0.0);
        let linear_solver = if sys.is_diagonal() && sys.channels() == 1 && s_is_zero {
            LinearSolverMode::Oracle
        } else {
            LinearSolverMode::Mc { n_eta: self.run.n_eta }
        };

        let snapshots = if needs_snapshots {
            self.run
                .snapshots
                .iter()
                .map(|&t| grid.node_of_time(t).map_err(|e| config_err(format!("run.snapshots: {e}"))))
                .collect::<Result<Vec<_>, _>>()?
        } else {
            Vec::new()
        };

        let xi_import = match &self.run.xi_csv {
            Some(rel_path) => {
                let path = base_dir.join(rel_path);
                let file = fs::File::open(&path)
                    .map_err(|e| config_err(format!("run.xi_csv {}: {e}", path.display())))?;
                let field = nmsse::io::read_field_csv(file)
                    .map_err(|e| config_err(format!("run.xi_csv: {e}")))?;
                if field.channels() != sys.channels() || field.nodes() != grid.len() {
                    return Err(config_err(format!(
                        "run.xi_csv: field is {}x{}, expected {}x{}",
                        field.channels(),
                        field.nodes(),
                        sys.channels(),
                        grid.len()
                    )));
                }
                Some(field)
            }
            None => None,
        };

        Ok(Resolved {
            sys,
            grid,
            kernels,
            xi_import,
            scheme,
            inner,
            linear_solver,
            snapshots,
            // input paths resolve against the config file; artifacts go
            // relative to the working directory
            out_dir: PathBuf::from(&self.output.dir),
            config_hash: self.hash(),
        })
    }
}

fn parse_matrix(rows: &[Vec<[f64; 2]>]) -> Result<Array2<Complex64>, String> {
    let dim = rows.len();
    let mut out = Array2::<Complex64>::zeros((dim, dim));
    for (i, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(format!("row {i} has {} entries, expected {dim}", row.len()));
        }
        for (j, [re, im]) in row.iter().enumerate() {
            out[(i, j)] = Complex64::new(*re, *im);
        }
    }
    Ok(out)
}

/// Tabulated coupling amplitudes κ(channel, bath, ω) read from CSV.
struct CouplingTable {
    omegas: Vec<f64>,
    /// Row-major per ω: channels × baths amplitudes.
    values: Vec<Vec<Complex64>>,
    channels: usize,
    baths: usize,
}

impl CouplingTable {
    fn load(path: &Path, channels: usize, baths: usize) -> Result<Self, CliError> {
        let file = fs::File::open(path)
            .map_err(|e| config_err(format!("cannot open {}: {e}", path.display())))?;
        let mut reader = csv::Reader::from_reader(file);
        let expected = 1 + 2 * channels * baths;
        let mut omegas = Vec::new();
        let mut values = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            if record.len() != expected {
                return Err(config_err(format!(
                    "{}: row has {} columns, expected {expected}",
                    path.display(),
                    record.len()
                )));
            }
            let parse = |idx: usize| -> Result<f64, CliError> {
                record[idx]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| config_err(format!("{}: bad float {:?}", path.display(), &record[idx])))
            };
            omegas.push(parse(0)?);
            let mut row = Vec::with_capacity(channels * baths);
            for pair in 0..channels * baths {
                row.push(Complex64::new(parse(1 + 2 * pair)?, parse(2 + 2 * pair)?));
            }
            values.push(row);
        }
        if omegas.len() < 2 {
            return Err(config_err(format!(
                "{}: need at least two frequency rows",
                path.display()
            )));
        }
        if omegas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(config_err(format!(
                "{}: omega column must be strictly increasing",
                path.display()
            )));
        }
        Ok(Self {
            omegas,
            values,
            channels,
            baths,
        })
    }

    fn lookup(&self, channel: usize, bath: usize, omega: f64) -> Complex64 {
        // The quadrature hands back exactly the ω values of the table.
        let idx = self
            .omegas
            .binary_search_by(|probe| probe.total_cmp(&omega))
            .unwrap_or_else(|near| near.min(self.omegas.len() - 1));
        debug_assert!(channel < self.channels && bath < self.baths);
        self.values[idx][channel * self.baths + bath]
    }
}

/// Deterministic JSON map for manifests (BTreeMap keeps keys sorted).
pub type Summary = BTreeMap<String, serde_json::Value>;
