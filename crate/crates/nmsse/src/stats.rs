//! Estimator support: robust summaries, weighted histograms and the
//! two-sample Kolmogorov-Smirnov distance used to compare the nonlinear
//! sampler against reweighted linear sampling.

/// Standard error of a mean from accumulated moments: `second` is the mean
/// of squares, `mean_sq` the squared mean, `n` the sample count. Cancellation
/// residue below 1e-14 of the second moment is treated as an exactly
/// degenerate sample.
pub fn stderr_of_mean(second: f64, mean_sq: f64, n: f64) -> f64 {
    let centered = second - mean_sq;
    if n < 2.0 || centered <= 1e-14 * second.abs() {
        return 0.0;
    }
    (centered * n / (n - 1.0) / n).sqrt()
}

/// Median of a slice (averaged pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Least-squares slope of y against x.
pub fn linear_fit_slope(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        num += (xi - mx) * (yi - my);
        den += (xi - mx) * (xi - mx);
    }
    num / den
}

/// A density histogram with uniform bins; bin masses sum to one before
/// dividing by the bin width.
#[derive(Debug, Clone)]
pub struct Histogram {
    /// Bin edges, `bins + 1` entries.
    pub edges: Vec<f64>,
    pub density: Vec<f64>,
}

impl Histogram {
    /// Histogram of (optionally weighted) values over `range` with uniform
    /// bins; weights are normalized to unit mass.
    pub fn new(values: &[f64], weights: Option<&[f64]>, bins: usize, range: (f64, f64)) -> Self {
        assert!(bins > 0 && range.1 > range.0);
        let width = (range.1 - range.0) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|b| range.0 + b as f64 * width).collect();
        let mut mass = vec![0.0f64; bins];
        let mut total = 0.0f64;
        for (idx, &v) in values.iter().enumerate() {
            let w = weights.map_or(1.0, |ws| ws[idx]);
            total += w;
            if v < range.0 || v > range.1 {
                continue;
            }
            let bin = (((v - range.0) / width) as usize).min(bins - 1);
            mass[bin] += w;
        }
        let density = mass
            .iter()
            .map(|&m| if total > 0.0 { m / total / width } else { 0.0 })
            .collect();
        Self { edges, density }
    }

    pub fn bins(&self) -> usize {
        self.density.len()
    }
}

/// Observed range of a set of slices, as a common histogram support.
pub fn observed_range(sets: &[&[f64]]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for set in sets {
        for &v in *set {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        // degenerate support: widen symmetrically
        let pad = lo.abs().max(1.0) * 1e-9;
        (lo - pad, hi + pad)
    } else {
        (lo, hi)
    }
}

/// Two-sample Kolmogorov-Smirnov statistic between an unweighted sample and
/// a (possibly weighted) sample: sup |F₁ - F₂| over the pooled support.
pub fn ks_statistic(a: &[f64], b: &[f64], b_weights: Option<&[f64]>) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    let mut xs: Vec<f64> = a.to_vec();
    let mut ys: Vec<(f64, f64)> = match b_weights {
        Some(ws) => b.iter().copied().zip(ws.iter().copied()).collect(),
        None => b.iter().map(|&v| (v, 1.0)).collect(),
    };
    xs.sort_by(|p, q| p.total_cmp(q));
    ys.sort_by(|p, q| p.0.total_cmp(&q.0));
    let total_w: f64 = ys.iter().map(|(_, w)| w).sum();

    let mut i = 0usize;
    let mut j = 0usize;
    let mut fa = 0.0f64;
    let mut fb = 0.0f64;
    let mut acc_w = 0.0f64;
    let mut worst = 0.0f64;
    while i < xs.len() || j < ys.len() {
        let next = match (xs.get(i), ys.get(j)) {
            (Some(&x), Some(&(y, _))) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&(y, _))) => y,
            (None, None) => break,
        };
        while i < xs.len() && xs[i] <= next {
            i += 1;
        }
        while j < ys.len() && ys[j].0 <= next {
            acc_w += ys[j].1;
            j += 1;
        }
        fa = i as f64 / xs.len() as f64;
        fb = acc_w / total_w;
        worst = worst.max((fa - fb).abs());
    }
    debug_assert!((fa - 1.0).abs() < 1e-12 && (fb - 1.0).abs() < 1e-12);
    worst
}

/// Kish effective sample size of a weighted sample: (Σw)²/Σw².
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

/// Two-sample KS critical value at the 1% level,
/// c(0.01)·sqrt((n₁+n₂)/(n₁·n₂)) with c(0.01) = 1.62762.
pub fn ks_critical_1pct(n1: f64, n2: f64) -> f64 {
    1.62762 * ((n1 + n2) / (n1 * n2)).sqrt()
}
