//! CSV import/export. Floats are written with 17 significant digits so that
//! reruns with the same seed produce byte-identical payloads.

use std::io::{Read, Write};

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fields::FieldRealization;
use crate::kernels::DiscretizedKernel;
use crate::linear::{StateTrajectory, TrajectoryEstimate};
use crate::stats::Histogram;

/// 17 significant digits round-trip any f64 exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv(e.to_string())
}

fn parse_f64(field: &str, what: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::Csv(format!("cannot parse {what} from {field:?}")))
}

fn parse_usize(field: &str, what: &str) -> Result<usize> {
    field
        .trim()
        .parse::<usize>()
        .map_err(|_| Error::Csv(format!("cannot parse {what} from {field:?}")))
}

/// Kernel matrix, row-major, header `i,a,j,b,re,im`.
pub fn write_kernel_csv<W: Write>(writer: W, kernel: &DiscretizedKernel) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["i", "a", "j", "b", "re", "im"]).map_err(csv_err)?;
    let m = kernel.nodes();
    for i in 0..kernel.channels() {
        for a in 0..m {
            for j in 0..kernel.channels() {
                for b in 0..m {
                    let v = kernel.entry(i, a, j, b);
                    out.write_record([
                        i.to_string(),
                        a.to_string(),
                        j.to_string(),
                        b.to_string(),
                        fmt_f64(v.re),
                        fmt_f64(v.im),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
    }
    out.flush().map_err(|e| Error::Csv(e.to_string()))
}

/// Field realization, header `channel,node,re,im`.
pub fn write_field_csv<W: Write>(writer: W, field: &FieldRealization) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["channel", "node", "re", "im"]).map_err(csv_err)?;
    for k in 0..field.channels() {
        for m in 0..field.nodes() {
            let v = field.value(k, m);
            out.write_record([k.to_string(), m.to_string(), fmt_f64(v.re), fmt_f64(v.im)])
                .map_err(csv_err)?;
        }
    }
    out.flush().map_err(|e| Error::Csv(e.to_string()))
}

/// Read a field written by [`write_field_csv`].
pub fn read_field_csv<R: Read>(reader: R) -> Result<FieldRealization> {
    let mut input = csv::Reader::from_reader(reader);
    let mut entries: Vec<(usize, usize, Complex64)> = Vec::new();
    let mut channels = 0usize;
    let mut nodes = 0usize;
    for record in input.records() {
        let record = record.map_err(csv_err)?;
        if record.len() != 4 {
            return Err(Error::Csv(format!(
                "field row has {} columns, expected 4",
                record.len()
            )));
        }
        let k = parse_usize(&record[0], "channel")?;
        let m = parse_usize(&record[1], "node")?;
        let re = parse_f64(&record[2], "re")?;
        let im = parse_f64(&record[3], "im")?;
        channels = channels.max(k + 1);
        nodes = nodes.max(m + 1);
        entries.push((k, m, Complex64::new(re, im)));
    }
    if entries.is_empty() {
        return Err(Error::Csv("field file has no rows".into()));
    }
    if entries.len() != channels * nodes {
        return Err(Error::Csv(format!(
            "field file has {} rows, expected {}x{}",
            entries.len(),
            channels,
            nodes
        )));
    }
    let mut values = Array2::<Complex64>::zeros((channels, nodes));
    for (k, m, v) in entries {
        values[(k, m)] = v;
    }
    Ok(FieldRealization::from_values(values))
}

fn trajectory_header(dim: usize, with_stderr: bool) -> Vec<String> {
    let mut header = vec!["t".to_string()];
    for j in 0..dim {
        header.push(format!("re_{j}"));
        header.push(format!("im_{j}"));
    }
    if with_stderr {
        for j in 0..dim {
            header.push(format!("stderr_{j}"));
        }
    }
    header
}

/// Trajectory rows `t, re_j, im_j…` (no error bars).
pub fn write_trajectory_csv<W: Write>(writer: W, traj: &StateTrajectory) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let dim = traj.states.ncols();
    out.write_record(trajectory_header(dim, false)).map_err(csv_err)?;
    for m in 0..traj.states.nrows() {
        let mut row = vec![fmt_f64(traj.grid.node(m))];
        for j in 0..dim {
            row.push(fmt_f64(traj.states[(m, j)].re));
            row.push(fmt_f64(traj.states[(m, j)].im));
        }
        out.write_record(row).map_err(csv_err)?;
    }
    out.flush().map_err(|e| Error::Csv(e.to_string()))
}

/// Estimate rows `t, re_j, im_j…, stderr_j…` (the snapshot data series).
pub fn write_estimate_csv<W: Write>(writer: W, est: &TrajectoryEstimate) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let dim = est.mean.ncols();
    out.write_record(trajectory_header(dim, true)).map_err(csv_err)?;
    for m in 0..est.mean.nrows() {
        let mut row = vec![fmt_f64(est.grid.node(m))];
        for j in 0..dim {
            row.push(fmt_f64(est.mean[(m, j)].re));
            row.push(fmt_f64(est.mean[(m, j)].im));
        }
        for j in 0..dim {
            row.push(fmt_f64(est.stderr[(m, j)]));
        }
        out.write_record(row).map_err(csv_err)?;
    }
    out.flush().map_err(|e| Error::Csv(e.to_string()))
}

/// Histogram rows `bin_left,bin_right,density`.
pub fn write_histogram_csv<W: Write>(writer: W, hist: &Histogram) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["bin_left", "bin_right", "density"]).map_err(csv_err)?;
    for b in 0..hist.bins() {
        out.write_record([
            fmt_f64(hist.edges[b]),
            fmt_f64(hist.edges[b + 1]),
            fmt_f64(hist.density[b]),
        ])
        .map_err(csv_err)?;
    }
    out.flush().map_err(|e| Error::Csv(e.to_string()))
}
