use crate::error::{Error, Result};

/// Uniform time grid on `[0, t_max]` with nodes `t_m = m·dt`, `m = 0..M-1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_max: f64,
    dt: f64,
    nodes: usize,
}

impl TimeGrid {
    /// Grid from an interval length and a step; `t_max` must be an integer
    /// multiple of `dt` up to a relative slack of 1e-12.
    pub fn new(t_max: f64, dt: f64) -> Result<Self> {
        if !dt.is_finite() || dt <= 0.0 {
            return Err(Error::InvalidGrid(format!("dt must be positive, got {dt}")));
        }
        if !t_max.is_finite() || t_max <= 0.0 {
            return Err(Error::InvalidGrid(format!("t_max must be positive, got {t_max}")));
        }
        let steps = (t_max / dt).round();
        if steps < 1.0 {
            return Err(Error::InvalidGrid("grid needs at least two nodes".into()));
        }
        if (t_max - steps * dt).abs() > 1e-12 * t_max {
            return Err(Error::InvalidGrid(format!(
                "t_max = {t_max} is not an integer multiple of dt = {dt}"
            )));
        }
        Ok(Self {
            t_max,
            dt,
            nodes: steps as usize + 1,
        })
    }

    /// Grid with an explicit node count, `t_max = (nodes-1)·dt`.
    pub fn with_nodes(dt: f64, nodes: usize) -> Result<Self> {
        if !dt.is_finite() || dt <= 0.0 {
            return Err(Error::InvalidGrid(format!("dt must be positive, got {dt}")));
        }
        if nodes < 2 {
            return Err(Error::InvalidGrid("grid needs at least two nodes".into()));
        }
        Ok(Self {
            t_max: (nodes - 1) as f64 * dt,
            dt,
            nodes,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    /// Number of nodes M.
    pub fn len(&self) -> usize {
        self.nodes
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, m: usize) -> f64 {
        m as f64 * self.dt
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.nodes).map(|m| self.node(m))
    }

    /// Index of the node closest to `t`; errors if `t` is off the grid by
    /// more than 1e-9 of a step.
    pub fn node_of_time(&self, t: f64) -> Result<usize> {
        let m = (t / self.dt).round();
        if m < 0.0 || m as usize >= self.nodes || (t - m * self.dt).abs() > 1e-9 * self.dt {
            return Err(Error::InvalidGrid(format!("time {t} is not a grid node")));
        }
        Ok(m as usize)
    }

    /// Trapezoidal weights for `∫₀^{t_v}` over nodes `0..=v`. For `v = 0`
    /// the integral is empty and the single weight is zero.
    pub fn trapezoid_weights(&self, v: usize) -> Vec<f64> {
        assert!(v < self.nodes, "node {v} outside grid of {} nodes", self.nodes);
        if v == 0 {
            return vec![0.0];
        }
        let mut w = vec![self.dt; v + 1];
        w[0] = 0.5 * self.dt;
        w[v] = 0.5 * self.dt;
        w
    }
}
