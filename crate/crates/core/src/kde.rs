//! CF-usage density estimates and histograms.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{invalid, GravacError, Result};
use crate::metrics::Cf;
use crate::sim::TraceRecord;

pub const DEFAULT_BANDWIDTH: f64 = 0.1;
pub const DEFAULT_GRID_POINTS: usize = 512;

/// Fixed-bandwidth Gaussian KDE evaluated at each grid point.
pub fn gaussian_kde(samples: &[f64], bandwidth: f64, grid: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(invalid("samples", "need at least one sample"));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(invalid("bandwidth", format!("{bandwidth} must be > 0")));
    }
    let norm = 1.0 / (samples.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let inv_two_h2 = 1.0 / (2.0 * bandwidth * bandwidth);
    Ok(grid
        .iter()
        .map(|&x| {
            norm * samples
                .iter()
                .map(|&s| (-(x - s).powi(2) * inv_two_h2).exp())
                .sum::<f64>()
        })
        .collect())
}

/// `points` evenly spaced values covering `[lo, hi]`.
pub fn linear_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![lo],
        n => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Grid over `[0, log10(θ_max)]` padded by five bandwidths on each side.
pub fn default_grid(theta_max: f64, bandwidth: f64, points: usize) -> Vec<f64> {
    let pad = 5.0 * bandwidth;
    linear_grid(-pad, theta_max.max(1.0).log10() + pad, points)
}

/// log10 of the CF used at each iteration.
pub fn cf_usage_samples(trace: &[TraceRecord]) -> Result<Vec<f64>> {
    trace
        .iter()
        .map(|r| {
            if r.cf >= 1.0 {
                Ok(r.cf.log10())
            } else {
                Err(GravacError::InvalidCompressionFactor(r.cf))
            }
        })
        .collect()
}

/// Iteration count per CF.
pub fn cf_histogram(trace: &[TraceRecord]) -> Result<BTreeMap<Cf, u64>> {
    if trace.is_empty() {
        return Err(GravacError::Trace("empty trace".into()));
    }
    let mut hist = BTreeMap::new();
    for r in trace {
        *hist.entry(Cf(r.cf)).or_insert(0) += 1;
    }
    Ok(hist)
}

/// Trapezoid-rule integral of `ys` over `xs`.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

pub fn kde_csv(grid: &[f64], density: &[f64]) -> String {
    let mut out = String::from("grid,density\n");
    for (x, d) in grid.iter().zip(density) {
        let _ = writeln!(out, "{x},{d}");
    }
    out
}

pub fn histogram_csv(hist: &BTreeMap<Cf, u64>) -> String {
    let mut out = String::from("cf,iterations\n");
    for (cf, n) in hist {
        let _ = writeln!(out, "{cf},{n}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn record(iter: u64, cf: f64) -> TraceRecord {
        TraceRecord {
            iter,
            cf,
            ..TraceRecord::default()
        }
    }

    #[test]
    fn single_sample_peak() {
        let d = gaussian_kde(&[0.7], 0.1, &[0.7]).unwrap();
        assert_relative_eq!(d[0], 3.989_422_804, max_relative = 1e-9);
    }

    #[test]
    fn mass_integrates_to_one() {
        let samples = [0.0, 1.0, 1.3, 2.0, 3.0, 3.0];
        let grid = linear_grid(-0.5, 3.5, 4001);
        let d = gaussian_kde(&samples, 0.1, &grid).unwrap();
        assert!((trapezoid(&grid, &d) - 1.0).abs() <= 1e-3);
        assert!(d.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn symmetric_clusters() {
        let samples = [1.0, 1.0, 3.0, 3.0];
        let d = gaussian_kde(&samples, 0.1, &[1.9, 2.1, 0.5, 3.5]).unwrap();
        assert_relative_eq!(d[0], d[1], max_relative = 1e-12);
        assert_relative_eq!(d[2], d[3], max_relative = 1e-12);
    }

    #[test]
    fn kde_errors() {
        assert!(gaussian_kde(&[], 0.1, &[0.0]).is_err());
        assert!(gaussian_kde(&[1.0], 0.0, &[0.0]).is_err());
    }

    #[test]
    fn histograms() {
        let dense: Vec<_> = (1..=7).map(|i| record(i, 1.0)).collect();
        let h = cf_histogram(&dense).unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(h[&Cf(1.0)], 7);

        let alt: Vec<_> = (1..=10)
            .map(|i| record(i, if i % 2 == 0 { 10.0 } else { 40.0 }))
            .collect();
        let h = cf_histogram(&alt).unwrap();
        assert_eq!((h[&Cf(10.0)], h[&Cf(40.0)]), (5, 5));
        assert!(cf_histogram(&[]).is_err());
        assert_eq!(histogram_csv(&h), "cf,iterations\n10,5\n40,5\n");
    }

    #[test]
    fn dense_density_concentrates_at_zero() {
        let dense: Vec<_> = (1..=50).map(|i| record(i, 1.0)).collect();
        let samples = cf_usage_samples(&dense).unwrap();
        let grid = default_grid(1000.0, 0.1, 2001);
        let d = gaussian_kde(&samples, 0.1, &grid).unwrap();
        let (argmax, _) =
            d.iter().enumerate().fold(
                (0, f64::MIN),
                |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
            );
        assert!(grid[argmax].abs() < 0.01);
        assert!((trapezoid(&grid, &d) - 1.0).abs() <= 1e-3);
    }
}
