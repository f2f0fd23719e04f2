//! Empirical Wasserstein distances, histograms and log-linear rate fits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("empty sample set")]
    Empty,
    #[error("sample sizes differ: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("Wasserstein order must be >= 1, got {0}")]
    BadOrder(f64),
    #[error("brute-force transport is limited to 8 points, got {0}")]
    TooLarge(usize),
    #[error("need at least {needed} positive points in the fit window, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("histogram needs bins >= 1 and lo < hi, got {bins} bins on [{lo}, {hi}]")]
    BadHistogram { bins: usize, lo: f64, hi: f64 },
}

fn check_order(p: f64) -> Result<(), MetricError> {
    if p >= 1.0 && p.is_finite() {
        Ok(())
    } else {
        Err(MetricError::BadOrder(p))
    }
}

fn power_mean(sum: f64, n: usize, p: f64) -> f64 {
    let m = sum / n as f64;
    if p == 1.0 {
        m
    } else {
        m.powf(1.0 / p)
    }
}

/// `W^p` between the empirical law of `sorted` and a law given by its
/// quantile function, matching the i-th order statistic with the
/// `(i - 1/2)/N` quantile.
pub fn wasserstein_p_vs_density<Q: Fn(f64) -> f64>(
    sorted: &[f64],
    quantile: Q,
    p: f64,
) -> Result<f64, MetricError> {
    check_order(p)?;
    if sorted.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = sorted.len();
    let sum: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| (x - quantile((i as f64 + 0.5) / n as f64)).abs().powf(p))
        .sum();
    Ok(power_mean(sum, n, p))
}

/// `W^p` to the point mass at `target`.
pub fn wasserstein_p_to_dirac(samples: &[f64], target: f64, p: f64) -> Result<f64, MetricError> {
    check_order(p)?;
    if samples.is_empty() {
        return Err(MetricError::Empty);
    }
    let sum: f64 = samples.iter().map(|&x| (target - x).abs().powf(p)).sum();
    Ok(power_mean(sum, samples.len(), p))
}

pub fn sorted_copy(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// `W^p` between two equal-size empirical measures.
pub fn wasserstein_p_sample_sample(a: &[f64], b: &[f64], p: f64) -> Result<f64, MetricError> {
    check_order(p)?;
    if a.len() != b.len() {
        return Err(MetricError::SizeMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    let (sa, sb) = (sorted_copy(a), sorted_copy(b));
    let sum: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs().powf(p)).sum();
    Ok(power_mean(sum, a.len(), p))
}

pub fn wasserstein_1_sample_sample(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    wasserstein_p_sample_sample(a, b, 1.0)
}

/// Exact optimal transport cost by enumerating every bijection (Heap's
/// algorithm). Reference only.
pub fn ot_bruteforce_oracle(a: &[f64], b: &[f64], p: f64) -> Result<f64, MetricError> {
    check_order(p)?;
    if a.len() != b.len() {
        return Err(MetricError::SizeMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n == 0 {
        return Err(MetricError::Empty);
    }
    if n > 8 {
        return Err(MetricError::TooLarge(n));
    }
    let cost = |perm: &[usize]| -> f64 {
        perm.iter()
            .enumerate()
            .map(|(i, &j)| (a[i] - b[j]).abs().powf(p))
            .sum()
    };
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = cost(&perm);
    let mut c = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(cost(&perm));
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(power_mean(best, n, p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFitReport {
    pub rate: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
    pub points_used: usize,
    pub nonpositive_excluded: usize,
}

pub const MIN_FIT_POINTS: usize = 4;

/// Least-squares line through `(t, ln v)` for points with `t` in `window`.
/// Nonpositive values are skipped and counted.
pub fn fit_exponential_rate(
    series: &[(f64, f64)],
    window: (f64, f64),
) -> Result<RateFitReport, MetricError> {
    let in_window = series
        .iter()
        .filter(|(t, _)| *t >= window.0 && *t <= window.1);
    let mut excluded = 0;
    let mut pts = Vec::new();
    for &(t, v) in in_window {
        if v > 0.0 && v.is_finite() {
            pts.push((t, v.ln()));
        } else {
            excluded += 1;
        }
    }
    if pts.len() < MIN_FIT_POINTS {
        return Err(MetricError::InsufficientPoints {
            needed: MIN_FIT_POINTS,
            got: pts.len(),
        });
    }
    let n = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut stt, mut sty, mut syy) = (0.0, 0.0, 0.0);
    for &(t, y) in &pts {
        stt += (t - tm) * (t - tm);
        sty += (t - tm) * (y - ym);
        syy += (y - ym) * (y - ym);
    }
    if stt == 0.0 {
        return Err(MetricError::InsufficientPoints {
            needed: 2,
            got: 1,
        });
    }
    let rate = sty / stt;
    let intercept = ym - rate * tm;
    // A flat series has nothing to explain; report r² = 0 rather than 0/0.
    let r_squared = if syy <= f64::EPSILON * f64::EPSILON * n * (1.0 + ym * ym) {
        0.0
    } else {
        (sty * sty / (stt * syy)).clamp(0.0, 1.0)
    };
    Ok(RateFitReport {
        rate,
        intercept,
        r_squared,
        window,
        points_used: pts.len(),
        nonpositive_excluded: excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
    /// Divide a count by this to get a density estimate.
    pub density_normalization: f64,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }

    pub fn bin_width(&self) -> f64 {
        self.edges[1] - self.edges[0]
    }

    pub fn densities(&self) -> Vec<f64> {
        self.counts
            .iter()
            .map(|&c| c as f64 / self.density_normalization)
            .collect()
    }
}

/// Equal-width bins on `[lo, hi]`; the last bin is closed on the right.
pub fn histogram(samples: &[f64], bins: usize, range: (f64, f64)) -> Result<Histogram, MetricError> {
    let (lo, hi) = range;
    if bins == 0 || !(lo < hi) {
        return Err(MetricError::BadHistogram { bins, lo, hi });
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    let (mut under, mut over) = (0, 0);
    for &x in samples {
        if x < lo {
            under += 1;
        } else if x > hi || x.is_nan() {
            over += 1;
        } else {
            let k = (((x - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
    }
    Ok(Histogram {
        edges: (0..=bins).map(|k| lo + k as f64 * width).collect(),
        counts,
        underflow: under,
        overflow: over,
        density_normalization: samples.len() as f64 * width,
    })
}

/// Two-dimensional counts on `[lo, hi]²`, row-major in `(bin_x, bin_y)`.
pub fn histogram_2d(
    xs: &[f64],
    ys: &[f64],
    bins: usize,
    range: (f64, f64),
) -> Result<Vec<(usize, usize, u64)>, MetricError> {
    let (lo, hi) = range;
    if bins == 0 || !(lo < hi) {
        return Err(MetricError::BadHistogram { bins, lo, hi });
    }
    if xs.len() != ys.len() {
        return Err(MetricError::SizeMismatch(xs.len(), ys.len()));
    }
    let width = (hi - lo) / bins as f64;
    let idx = |v: f64| (((v - lo) / width).max(0.0) as usize).min(bins - 1);
    let mut counts = vec![0u64; bins * bins];
    for (&x, &y) in xs.iter().zip(ys) {
        counts[idx(x) * bins + idx(y)] += 1;
    }
    Ok((0..bins * bins)
        .map(|k| (k / bins, k % bins, counts[k]))
        .collect())
}

/// Mean `W¹` between two independent `n`-samples from the same law, over
/// `repeats` pairs. `draw(r)` must return the r-th independent sample.
pub fn noise_floor<D: Fn(usize) -> Vec<f64>>(repeats: usize, draw: D) -> Result<f64, MetricError> {
    if repeats == 0 {
        return Err(MetricError::Empty);
    }
    let mut total = 0.0;
    for r in 0..repeats {
        let a = draw(2 * r);
        let b = draw(2 * r + 1);
        total += wasserstein_1_sample_sample(&a, &b)?;
    }
    Ok(total / repeats as f64)
}
