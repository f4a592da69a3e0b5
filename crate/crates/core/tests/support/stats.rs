//! Metric reductions checked against brute-force oracles on randomized
//! fixtures.

use edgebench_core::metrics::{
    aggregate_resources, detect_knee, ecdf, summarize, KneePoint, ResourceSample,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FIXTURES: u64 = 100;

fn latency_fixture(rng: &mut ChaCha8Rng) -> Vec<u64> {
    let n = rng.random_range(1..=600);
    match rng.random_range(0..4) {
        // heavy ties
        0 => (0..n).map(|_| rng.random_range(0..5u64) * 1_000_000).collect(),
        // wide uniform
        1 => (0..n).map(|_| rng.random_range(0..10_000_000_000u64)).collect(),
        // log-spread, like real latencies
        2 => (0..n)
            .map(|_| 10f64.powf(rng.random_range(5.0..10.0)) as u64)
            .collect(),
        // constant
        _ => vec![rng.random_range(1..1_000_000u64); n],
    }
}

/// Smallest sample value whose inclusive count reaches bp/10000 of n.
fn oracle_quantile(xs: &[u64], bp: u64) -> u64 {
    let n = xs.len() as u64;
    let mut best: Option<u64> = None;
    for &c in xs {
        let count = xs.iter().filter(|&&x| x <= c).count() as u64;
        if count * 10_000 >= bp * n && best.is_none_or(|b| c < b) {
            best = Some(c);
        }
    }
    best.unwrap()
}

fn oracle_ecdf(xs: &[u64], at: u64) -> f64 {
    xs.iter().filter(|&&x| x <= at).count() as f64 / xs.len() as f64
}

fn resource_fixture(rng: &mut ChaCha8Rng) -> Vec<ResourceSample> {
    let mut rows = Vec::new();
    for comp in ["broker", "aggregator", "cloudsim"] {
        let n = rng.random_range(1..=40);
        let mut ts = rng.random_range(1..3u64);
        let (mut net_in, mut net_out) = (0u64, 0u64);
        for _ in 0..n {
            net_in += rng.random_range(0..2_000_000);
            net_out += rng.random_range(0..2_000_000);
            rows.push(ResourceSample {
                run_id: "fixture".into(),
                ts_s: ts,
                component: comp.into(),
                // dyadic values keep sums exact in any order
                cpu_pct: rng.random_range(0..1600u32) as f64 / 8.0,
                mem_bytes: rng.random_range(1_000_000..4_000_000_000u64),
                net_in_cum: net_in,
                net_out_cum: net_out,
                dead: false,
            });
            ts += rng.random_range(1..=3);
        }
    }
    // the reducer must not rely on input order
    for i in (1..rows.len()).rev() {
        let j = rng.random_range(0..=i);
        rows.swap(i, j);
    }
    rows
}

pub fn quantiles_match_brute_force() {
    for f in 0..FIXTURES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + f);
        let xs = latency_fixture(&mut rng);
        let s = summarize(&xs).unwrap();
        assert_eq!(s.n, xs.len());
        assert_eq!(s.min, *xs.iter().min().unwrap(), "fixture {f}");
        assert_eq!(s.max, *xs.iter().max().unwrap(), "fixture {f}");
        assert_eq!(s.p25, oracle_quantile(&xs, 2500), "fixture {f}");
        assert_eq!(s.median, oracle_quantile(&xs, 5000), "fixture {f}");
        assert_eq!(s.p75, oracle_quantile(&xs, 7500), "fixture {f}");
        assert_eq!(s.p99, oracle_quantile(&xs, 9900), "fixture {f}");
        let mean = xs.iter().map(|&x| x as u128).sum::<u128>() as f64 / xs.len() as f64;
        assert!((s.mean - mean).abs() <= mean * 1e-12, "fixture {f}");
    }
}

pub fn ecdf_matches_brute_force() {
    for f in 0..FIXTURES {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + f);
        let xs = latency_fixture(&mut rng);
        let e = ecdf(&xs).unwrap();
        let mut probes: Vec<u64> = xs.clone();
        probes.extend(xs.iter().map(|x| x.saturating_sub(1)));
        probes.extend(xs.iter().map(|x| x + 1));
        probes.push(0);
        for p in probes {
            assert_eq!(e.eval(p), oracle_ecdf(&xs, p), "fixture {f} at {p}");
        }
        let down = e.downsample(512);
        assert_eq!(down.n, xs.len());
        assert!(down.points.len() <= 512);
        for &(x, y) in &down.points {
            assert!(xs.contains(&x));
            assert_eq!(y, oracle_ecdf(&xs, x), "fixture {f}");
        }
        assert_eq!(down.points.first().unwrap().0, *xs.iter().min().unwrap());
        assert_eq!(*down.points.last().unwrap(), (*xs.iter().max().unwrap(), 1.0));
        assert!(down.points.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1));
    }
}

pub fn resource_aggregates_match_brute_force() {
    for f in 0..FIXTURES {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + f);
        let rows = resource_fixture(&mut rng);
        let aggs = aggregate_resources(&rows).unwrap();
        assert_eq!(aggs.len(), 3);
        for a in &aggs {
            let mut mine: Vec<&ResourceSample> = rows.iter().filter(|r| r.component == a.component).collect();
            mine.sort_by_key(|r| r.ts_s);
            let n = mine.len();
            assert_eq!(a.samples, n);
            let cpu_sum: f64 = mine.iter().map(|r| r.cpu_pct).sum();
            let mem_sum: f64 = mine.iter().map(|r| r.mem_bytes as f64).sum();
            assert_eq!(a.cpu_pct.mean, cpu_sum / n as f64, "fixture {f}");
            assert_eq!(a.cpu_pct.min, mine.iter().map(|r| r.cpu_pct).fold(f64::INFINITY, f64::min));
            assert_eq!(a.cpu_pct.max, mine.iter().map(|r| r.cpu_pct).fold(f64::NEG_INFINITY, f64::max));
            assert_eq!(a.mem_bytes.mean, mem_sum / n as f64, "fixture {f}");
            assert_eq!(a.mem_bytes.min, mine.iter().map(|r| r.mem_bytes).min().unwrap() as f64);
            assert_eq!(a.mem_bytes.max, mine.iter().map(|r| r.mem_bytes).max().unwrap() as f64);
            assert_eq!(a.net_in_total, mine[n - 1].net_in_cum);
            assert_eq!(a.net_out_total, mine[n - 1].net_out_cum);
            let mut peak = 0f64;
            for i in 0..n {
                let (prev_ts, prev_net) = if i == 0 {
                    (mine[0].ts_s - 1, 0)
                } else {
                    (mine[i - 1].ts_s, mine[i - 1].net_in_cum + mine[i - 1].net_out_cum)
                };
                let delta = mine[i].net_in_cum + mine[i].net_out_cum - prev_net;
                peak = peak.max(delta as f64 / (mine[i].ts_s - prev_ts) as f64);
            }
            assert_eq!(a.net_peak_rate, peak, "fixture {f}");
        }
    }
}

pub fn knee_matches_brute_force() {
    for f in 0..FIXTURES {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + f);
        let n = rng.random_range(1..12);
        let mut users: Vec<u32> = (1..=n).map(|k| k * 100).collect();
        let threshold = 10_000.0;
        let points: Vec<KneePoint> = users
            .iter()
            .map(|&u| KneePoint {
                users: u,
                median_ms: rng.random_range(0.0..20_000.0),
                p99_ms: 0.0,
                max_ms: 0.0,
            })
            .collect();
        // oracle: a user count qualifies when it and every smaller count are under the threshold
        users.retain(|&u| points.iter().filter(|p| p.users <= u).all(|p| p.median_ms < threshold));
        let expected = users.into_iter().max().unwrap_or(0);
        let mut shuffled = points.clone();
        shuffled.reverse();
        assert_eq!(detect_knee(&shuffled, threshold), expected, "fixture {f}");
    }
}
