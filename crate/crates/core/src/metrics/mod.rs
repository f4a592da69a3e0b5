//! Reductions of latency samples and resource series.
//!
//! Quantiles use the nearest-rank convention on the sorted sample: the
//! p-quantile is the element of rank ⌈p·n⌉ (1-based). Densities are Gaussian
//! KDEs over log10 latency with Silverman's bandwidth.

pub mod resources;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use resources::{aggregate_resources, ResourceAggregate, ResourceSample, ResourceSampler, Stat, Watched};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("empty input")]
pub struct EmptyInput;

/// Nearest-rank quantile of a sorted slice; `bp` is the quantile in basis
/// points (2500 = p25).
pub fn nearest_rank(sorted: &[u64], bp: u32) -> u64 {
    assert!(!sorted.is_empty());
    let n = sorted.len() as u64;
    let rank = (bp as u64 * n).div_ceil(10_000).max(1);
    sorted[(rank - 1) as usize]
}

/// Distribution summary of latencies in nanoseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistSummary {
    pub n: usize,
    pub min: u64,
    pub p25: u64,
    pub median: u64,
    pub p75: u64,
    pub p99: u64,
    pub max: u64,
    pub mean: f64,
    /// (latency in ms, density of log10 latency) over a log-spaced grid.
    pub density: Vec<(f64, f64)>,
}

const KDE_POINTS: usize = 128;

pub fn summarize(samples: &[u64]) -> Result<DistSummary, EmptyInput> {
    if samples.is_empty() {
        return Err(EmptyInput);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let mean = sorted.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    Ok(DistSummary {
        n,
        min: sorted[0],
        p25: nearest_rank(&sorted, 2500),
        median: nearest_rank(&sorted, 5000),
        p75: nearest_rank(&sorted, 7500),
        p99: nearest_rank(&sorted, 9900),
        max: sorted[n - 1],
        mean,
        density: log_kde(&sorted),
    })
}

fn log_ms(ns: u64) -> f64 {
    (ns.max(1) as f64 / 1e6).log10()
}

/// Silverman's rule: 0.9·min(sd, IQR/1.34)·n^(-1/5), falling back to sd
/// (or a small constant) when the IQR or sd vanish.
pub fn silverman_bandwidth(xs_sorted: &[f64]) -> f64 {
    let n = xs_sorted.len() as f64;
    let mean = xs_sorted.iter().sum::<f64>() / n;
    let var = if xs_sorted.len() > 1 {
        xs_sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let sd = var.sqrt();
    let q = |p: f64| xs_sorted[((p * n).ceil() as usize).clamp(1, xs_sorted.len()) - 1];
    let iqr = q(0.75) - q(0.25);
    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr / 1.34),
        (true, false) => sd,
        _ => 0.05,
    };
    0.9 * spread * n.powf(-0.2)
}

fn log_kde(sorted_ns: &[u64]) -> Vec<(f64, f64)> {
    let xs: Vec<f64> = sorted_ns.iter().map(|&v| log_ms(v)).collect();
    let h = silverman_bandwidth(&xs);
    let lo = xs[0] - 3.0 * h;
    let hi = xs[xs.len() - 1] + 3.0 * h;
    let norm = 1.0 / (xs.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    (0..KDE_POINTS)
        .map(|i| {
            let g = lo + (hi - lo) * i as f64 / (KDE_POINTS - 1) as f64;
            // only points within 8 bandwidths contribute measurably
            let a = xs.partition_point(|&x| x < g - 8.0 * h);
            let b = xs.partition_point(|&x| x <= g + 8.0 * h);
            let d: f64 = xs[a..b].iter().map(|&x| (-0.5 * ((g - x) / h).powi(2)).exp()).sum();
            (10f64.powf(g), d * norm)
        })
        .collect()
}

/// Empirical CDF: F(x) = #{xᵢ ≤ x} / n.
#[derive(Debug, Clone, PartialEq)]
pub struct EcdfCurve {
    sorted: Vec<u64>,
}

pub fn ecdf(samples: &[u64]) -> Result<EcdfCurve, EmptyInput> {
    if samples.is_empty() {
        return Err(EmptyInput);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    Ok(EcdfCurve { sorted })
}

/// Downsampled ECDF as written to summary files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcdfPoints {
    pub n: usize,
    /// (latency ns, F) pairs, strictly increasing in both coordinates.
    pub points: Vec<(u64, f64)>,
}

impl EcdfCurve {
    pub fn n(&self) -> usize {
        self.sorted.len()
    }

    pub fn xs(&self) -> &[u64] {
        &self.sorted
    }

    pub fn eval(&self, x: u64) -> f64 {
        self.sorted.partition_point(|&v| v <= x) as f64 / self.sorted.len() as f64
    }

    /// Steps of the curve: one (x, F(x)) per distinct value.
    pub fn steps(&self) -> Vec<(u64, f64)> {
        let n = self.sorted.len();
        let mut out: Vec<(u64, f64)> = Vec::new();
        for (i, &x) in self.sorted.iter().enumerate() {
            if i + 1 == n || self.sorted[i + 1] != x {
                out.push((x, (i + 1) as f64 / n as f64));
            }
        }
        out
    }

    /// At most `max_points` steps, evenly spaced in rank, always keeping the
    /// first and last.
    pub fn downsample(&self, max_points: usize) -> EcdfPoints {
        let steps = self.steps();
        let points = if steps.len() <= max_points || max_points < 2 {
            steps
        } else {
            let last = steps.len() - 1;
            let mut picked: Vec<(u64, f64)> = (0..max_points)
                .map(|k| steps[k * last / (max_points - 1)])
                .collect();
            picked.dedup();
            picked
        };
        EcdfPoints {
            n: self.sorted.len(),
            points,
        }
    }
}

/// One swept cell of a knee analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KneePoint {
    pub users: u32,
    pub median_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KneeSeries {
    pub scenario: String,
    pub payload_bytes: usize,
    pub points: Vec<KneePoint>,
    pub max_scalable_users: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KneeReport {
    pub threshold_ms: f64,
    pub series: Vec<KneeSeries>,
}

/// Largest swept user count whose median, and the median of every smaller
/// swept count, stays below `threshold_ms`; 0 if the smallest one crosses.
pub fn detect_knee(points: &[KneePoint], threshold_ms: f64) -> u32 {
    let mut sorted = points.to_vec();
    sorted.sort_by_key(|p| p.users);
    let mut best = 0;
    for p in sorted {
        if p.median_ms < threshold_ms {
            best = p.users;
        } else {
            break;
        }
    }
    best
}

impl KneeReport {
    pub fn build(threshold_ms: f64, cells: &[(String, usize, KneePoint)]) -> KneeReport {
        let mut keys: Vec<(String, usize)> = cells.iter().map(|(s, b, _)| (s.clone(), *b)).collect();
        keys.sort();
        keys.dedup();
        let series = keys
            .into_iter()
            .map(|(scenario, payload_bytes)| {
                let mut points: Vec<KneePoint> = cells
                    .iter()
                    .filter(|(s, b, _)| *s == scenario && *b == payload_bytes)
                    .map(|(_, _, p)| *p)
                    .collect();
                points.sort_by_key(|p| p.users);
                let max_scalable_users = detect_knee(&points, threshold_ms);
                KneeSeries {
                    scenario,
                    payload_bytes,
                    points,
                    max_scalable_users,
                }
            })
            .collect();
        KneeReport { threshold_ms, series }
    }

    pub fn max_scalable(&self, scenario: &str, payload_bytes: usize) -> Option<u32> {
        self.series
            .iter()
            .find(|s| s.scenario == scenario && s.payload_bytes == payload_bytes)
            .map(|s| s.max_scalable_users)
    }
}
