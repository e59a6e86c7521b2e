//! Timing of the space-averaged covariance-of-covariance assembly: the
//! fast path through the member Gram matrix against the direct double sum
//! over element pairs.

use std::time::Instant;

use mlblue_core::moments::{averaged_covcov_model, averaged_covcov_naive};
use mlblue_core::synthetic::{calibration_ensemble, GaussianHierarchySpec};
use mlblue_core::{CovCovModel, GroupSamples};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub sizes: Vec<usize>,
    pub members: usize,
    pub levels: usize,
    pub repeats: usize,
    /// Largest `n` at which the quadratic path is also timed.
    pub naive_max: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            sizes: vec![1_000, 10_000, 100_000],
            members: 16,
            levels: 3,
            repeats: 5,
            naive_max: 2_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchPoint {
    pub n: usize,
    /// Fastest of the repeats, in seconds.
    pub fast_seconds: f64,
    pub naive_seconds: Option<f64>,
    /// Largest relative entry difference between the two paths.
    pub relative_difference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub members: usize,
    pub levels: usize,
    pub repeats: usize,
    pub points: Vec<BenchPoint>,
    /// Least-squares slope of log time against log n for the fast path.
    pub fast_slope: Option<f64>,
}

/// Independent standard normal entries, correlated across levels.
pub fn bench_samples(n: usize, members: usize, levels: usize, seed: u64) -> GroupSamples {
    let spec = GaussianHierarchySpec {
        mean: vec![0.0; levels],
        sigma: (0..levels).map(|l| 1.0 + 0.1 * l as f64).collect(),
        rho: vec![0.9; levels],
        elements: n,
    };
    calibration_ensemble(&spec, members, seed)
}

fn min_time<T>(repeats: usize, mut f: impl FnMut() -> T) -> (f64, T) {
    let mut best = f64::INFINITY;
    let mut out = None;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let v = f();
        best = best.min(t.elapsed().as_secs_f64());
        out = Some(v);
    }
    (best, out.expect("at least one repeat"))
}

fn max_rel_diff(a: &CovCovModel, b: &CovCovModel) -> f64 {
    let scale = a
        .first
        .iter()
        .chain(a.second.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let diff = (&a.first - &b.first).amax().max((&a.second - &b.second).amax());
    diff / scale
}

/// Slope of the least-squares line through `(ln x, ln y)`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

pub fn run_bench(opts: &BenchOptions) -> mlblue_core::Result<BenchReport> {
    let mut points = Vec::with_capacity(opts.sizes.len());
    for &n in &opts.sizes {
        let samples = bench_samples(n, opts.members, opts.levels, opts.seed);
        let (fast_seconds, fast) = min_time(opts.repeats, || averaged_covcov_model(&samples));
        let fast = fast?;
        let (naive_seconds, relative_difference) = if n <= opts.naive_max {
            let (t, naive) = min_time(opts.repeats, || averaged_covcov_naive(&samples));
            (Some(t), Some(max_rel_diff(&fast, &naive?)))
        } else {
            (None, None)
        };
        log::info!("n = {n}: fast {fast_seconds:.3e} s, naive {naive_seconds:?} s");
        points.push(BenchPoint {
            n,
            fast_seconds,
            naive_seconds,
            relative_difference,
        });
    }
    let fast_slope = log_log_slope(&points.iter().map(|p| (p.n as f64, p.fast_seconds)).collect::<Vec<_>>());
    Ok(BenchReport {
        members: opts.members,
        levels: opts.levels,
        repeats: opts.repeats,
        points,
        fast_slope,
    })
}
