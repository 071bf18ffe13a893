//! Observable reduction: windowed time/sample averages with error bars,
//! powers-of-two log-binning, and least-squares power-law fits.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("empty input")]
    Empty,
    #[error("mismatched input: {0}")]
    Mismatched(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("degenerate fit input: {0}")]
    Degenerate(String),
}

/// (year, value) samples with strictly increasing years.
#[derive(Debug, Clone, Default)]
pub struct TimeSeries {
    points: Vec<(u64, f64)>,
}

impl TimeSeries {
    pub fn new() -> Self {
        Self { points: Vec::new() }
    }

    pub fn push(&mut self, t: u64, value: f64) -> Result<(), StatsError> {
        if let Some(&(last, _)) = self.points.last() {
            if t <= last {
                return Err(StatsError::Invalid(format!(
                    "time {t} not after previous {last}"
                )));
            }
        }
        self.points.push((t, value));
        Ok(())
    }

    pub fn from_points(points: Vec<(u64, f64)>) -> Result<Self, StatsError> {
        let mut s = Self::new();
        for (t, v) in points {
            s.push(t, v)?;
        }
        Ok(s)
    }

    pub fn points(&self) -> &[(u64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One dyadic bin: years [2^k, 2^{k+1}).
#[derive(Debug, Clone, Copy)]
pub struct BinStat {
    pub k: u32,
    /// Geometric mean of the years present in the bin.
    pub t_geo: f64,
    /// Arithmetic mean of the values.
    pub mean: f64,
    /// Standard error of the mean within the bin.
    pub stderr: f64,
    pub count: u64,
}

#[derive(Debug, Clone, Default)]
pub struct BinnedSeries {
    pub bins: Vec<BinStat>,
}

/// Average a series over powers-of-two year windows. Empty bins are omitted.
pub fn log_bin(series: &TimeSeries) -> Result<BinnedSeries, StatsError> {
    if series.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut bins: Vec<BinStat> = Vec::new();
    let mut cur_k: Option<u32> = None;
    let (mut n, mut sum, mut sum_sq, mut sum_ln) = (0u64, 0.0f64, 0.0f64, 0.0f64);
    let flush = |k: Option<u32>, n: u64, sum: f64, sum_sq: f64, sum_ln: f64, bins: &mut Vec<BinStat>| {
        if let Some(k) = k {
            if n > 0 {
                let mean = sum / n as f64;
                let var = (sum_sq / n as f64 - mean * mean).max(0.0);
                let stderr = if n > 1 {
                    (var / (n as f64 - 1.0)).sqrt()
                } else {
                    0.0
                };
                bins.push(BinStat {
                    k,
                    t_geo: (sum_ln / n as f64).exp(),
                    mean,
                    stderr,
                    count: n,
                });
            }
        }
    };
    for &(t, v) in series.points() {
        if t == 0 {
            return Err(StatsError::Invalid("year 0 cannot be binned".into()));
        }
        let k = 63 - t.leading_zeros();
        if cur_k != Some(k) {
            flush(cur_k, n, sum, sum_sq, sum_ln, &mut bins);
            cur_k = Some(k);
            n = 0;
            sum = 0.0;
            sum_sq = 0.0;
            sum_ln = 0.0;
        }
        n += 1;
        sum += v;
        sum_sq += v * v;
        sum_ln += (t as f64).ln();
    }
    flush(cur_k, n, sum, sum_sq, sum_ln, &mut bins);
    Ok(BinnedSeries { bins })
}

/// Per-rank mean and standard error, averaged over time then over samples.
#[derive(Debug, Clone)]
pub struct RankProfile {
    /// One (mean, stderr) per rank, index 0 = rank 1.
    entries: Vec<(f64, f64)>,
    pub samples: usize,
}

impl RankProfile {
    /// Combine per-replica window means: the profile mean is the sample mean
    /// over replicas, the error bar the standard error over replicas.
    pub fn from_replica_means(means: &[Vec<f64>]) -> Result<Self, StatsError> {
        let s = means.len();
        if s == 0 {
            return Err(StatsError::Empty);
        }
        let width = means[0].len();
        if width == 0 {
            return Err(StatsError::Empty);
        }
        if means.iter().any(|m| m.len() != width) {
            return Err(StatsError::Mismatched(
                "replicas disagree on rank count".into(),
            ));
        }
        let mut entries = Vec::with_capacity(width);
        for r in 0..width {
            let vals: Vec<f64> = means.iter().map(|m| m[r]).collect();
            let mean = vals.iter().sum::<f64>() / s as f64;
            let stderr = if s > 1 {
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / (s as f64 - 1.0);
                (var / s as f64).sqrt()
            } else {
                0.0
            };
            entries.push((mean, stderr));
        }
        Ok(Self {
            entries,
            samples: s,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// (mean, stderr) at the given rank (1-based).
    pub fn rank(&self, rank: usize) -> (f64, f64) {
        self.entries[rank - 1]
    }

    pub fn entries(&self) -> &[(f64, f64)] {
        &self.entries
    }
}

/// Time average per replica over the trailing window, then sample average.
///
/// `replicas[s][year][rank]` holds per-year observable rows; the window is
/// the last `window_fraction` of the years (default one half).
pub fn time_sample_average(
    replicas: &[Vec<Vec<f64>>],
    window_fraction: f64,
) -> Result<RankProfile, StatsError> {
    if replicas.len() < 2 {
        return Err(StatsError::Invalid("need at least 2 replicas".into()));
    }
    if !(window_fraction > 0.0 && window_fraction < 1.0) {
        return Err(StatsError::Invalid(format!(
            "window fraction {window_fraction} outside (0, 1)"
        )));
    }
    let t = replicas[0].len();
    if t == 0 {
        return Err(StatsError::Empty);
    }
    if replicas.iter().any(|r| r.len() != t) {
        return Err(StatsError::Mismatched("replicas disagree on years".into()));
    }
    let width = replicas[0][0].len();
    let start = t - ((t as f64) * window_fraction).round() as usize;
    let mut means = Vec::with_capacity(replicas.len());
    for rep in replicas {
        if rep.iter().any(|row| row.len() != width) {
            return Err(StatsError::Mismatched("rows disagree on rank count".into()));
        }
        let window = &rep[start..];
        let mut m = vec![0.0; width];
        for row in window {
            for (acc, v) in m.iter_mut().zip(row) {
                *acc += v;
            }
        }
        for acc in &mut m {
            *acc /= window.len() as f64;
        }
        means.push(m);
    }
    RankProfile::from_replica_means(&means)
}

/// The order parameter: the rank-1 entry of the profile.
pub fn order_parameter(profile: &RankProfile) -> Result<(f64, f64), StatsError> {
    if profile.is_empty() {
        return Err(StatsError::Empty);
    }
    Ok(profile.rank(1))
}

/// A point for power-law fitting; `y_err` enables inverse-variance weighting.
#[derive(Debug, Clone, Copy)]
pub struct FitPoint {
    pub x: f64,
    pub y: f64,
    pub y_err: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct FitResult {
    /// Slope of log y vs log x.
    pub exponent: f64,
    pub exponent_stderr: f64,
    /// y = prefactor * x^exponent.
    pub prefactor: f64,
    /// Coefficient of determination on the log-log points.
    pub goodness: f64,
    pub range: (f64, f64),
    pub n_points: usize,
}

/// Weighted least squares of ln y on ln x over points with x inside `range`.
/// Weights are inverse-variance (via sigma_ln = y_err / y) when every point
/// carries a positive error bar, uniform otherwise.
pub fn fit_power_law(points: &[FitPoint], range: (f64, f64)) -> Result<FitResult, StatsError> {
    let sel: Vec<&FitPoint> = points
        .iter()
        .filter(|p| p.x >= range.0 && p.x <= range.1)
        .collect();
    if sel.len() < 3 {
        return Err(StatsError::Degenerate(format!(
            "need at least 3 points in range, got {}",
            sel.len()
        )));
    }
    if sel.iter().any(|p| !(p.x > 0.0 && p.y > 0.0)) {
        return Err(StatsError::Invalid("x and y must be positive".into()));
    }
    let weighted = sel.iter().all(|p| matches!(p.y_err, Some(e) if e > 0.0));
    let logs: Vec<(f64, f64, f64)> = sel
        .iter()
        .map(|p| {
            let w = if weighted {
                let sigma_ln = p.y_err.unwrap() / p.y;
                1.0 / (sigma_ln * sigma_ln)
            } else {
                1.0
            };
            (p.x.ln(), p.y.ln(), w)
        })
        .collect();
    let wsum: f64 = logs.iter().map(|l| l.2).sum();
    let xbar: f64 = logs.iter().map(|l| l.0 * l.2).sum::<f64>() / wsum;
    let ybar: f64 = logs.iter().map(|l| l.1 * l.2).sum::<f64>() / wsum;
    let sxx: f64 = logs.iter().map(|l| l.2 * (l.0 - xbar) * (l.0 - xbar)).sum();
    if sxx <= 0.0 || !sxx.is_finite() {
        return Err(StatsError::Degenerate("no spread in x".into()));
    }
    let sxy: f64 = logs.iter().map(|l| l.2 * (l.0 - xbar) * (l.1 - ybar)).sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;

    let n = logs.len() as f64;
    let ss_res: f64 = logs
        .iter()
        .map(|l| {
            let e = l.1 - (intercept + slope * l.0);
            l.2 * e * e
        })
        .sum();
    let exponent_stderr = if weighted {
        (1.0 / sxx).sqrt()
    } else if logs.len() > 2 {
        (ss_res / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };

    // R^2 on the (unweighted) log-log points.
    let ybar_u: f64 = logs.iter().map(|l| l.1).sum::<f64>() / n;
    let ss_res_u: f64 = logs
        .iter()
        .map(|l| {
            let e = l.1 - (intercept + slope * l.0);
            e * e
        })
        .sum();
    let ss_tot_u: f64 = logs.iter().map(|l| (l.1 - ybar_u) * (l.1 - ybar_u)).sum();
    let goodness = if ss_tot_u > 0.0 {
        (1.0 - ss_res_u / ss_tot_u).clamp(0.0, 1.0)
    } else if ss_res_u < 1e-24 {
        1.0
    } else {
        0.0
    };

    Ok(FitResult {
        exponent: slope,
        exponent_stderr,
        prefactor: intercept.exp(),
        goodness,
        range,
        n_points: logs.len(),
    })
}
