//! Acceptance criteria P1–P8, one PASS/FAIL line each.
//!
//! Everything runs at desk scale on the local host. Latency-trend criteria
//! compress time tenfold (mean inter-arrival 100 ms instead of 1 s, knee
//! threshold 1 s instead of 10 s) so a full sweep fits in minutes.
//!
//! `ACCEPTANCE_ONLY=P1,P4` restricts the run to the listed criteria.
//! Artifacts are kept under `$CARGO_TARGET_TMPDIR/acceptance`.

#[path = "../../core/tests/support/mod.rs"]
mod support;

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::future::Future;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use edgebench_core::metrics::resources::COMBINED;
use edgebench_core::orchestrator::{self, RunMatrix, RunOutcome, RunSpec, RunSummary};
use edgebench_core::workload::{read_samples, read_send_log};
use edgebench_core::{CloudModel, Config, Scenario};

const MEAN_MS: f64 = 100.0;
const SIGMA_MS: f64 = 10.0;
const KNEE_THRESHOLD_MS: f64 = 1000.0;
const SIZES: [usize; 2] = [1024, 10240];

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn check(pass: bool, detail: impl Into<String>) -> Verdict {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn desk_config(dir: &Path) -> Config {
    let mut c = Config::default();
    c.broker.port = 0;
    c.cloud.port = 0;
    c.workload.interarrival_mean_ms = MEAN_MS;
    c.workload.interarrival_sigma_ms = Some(SIGMA_MS);
    c.sweep.knee_threshold_ms = KNEE_THRESHOLD_MS;
    c.output.dir = dir.to_path_buf();
    c
}

fn fmt_ms(ns: u64) -> String {
    format!("{:.1}ms", ns as f64 / 1e6)
}

fn run_failures(runs: &[RunOutcome]) -> Vec<String> {
    runs.iter()
        .filter_map(|r| match (&r.error, &r.summary) {
            (Some(e), _) => Some(format!("{}: {e}", r.spec.run_id())),
            (None, Some(s)) if !s.conservation.holds || s.conservation.duplicates > 0 => {
                Some(format!("{}: {:?}", r.spec.run_id(), s.conservation))
            }
            (None, Some(s)) if !s.isolation.ok => Some(format!("{}: isolation {:?}", r.spec.run_id(), s.isolation)),
            _ => None,
        })
        .collect()
}

async fn p1() -> Verdict {
    let started = Instant::now();
    let mut cfg = desk_config(&root().join("p1"));
    cfg.workload.requests_per_user = 100;
    let matrix = RunMatrix {
        scenarios: Scenario::ALL.to_vec(),
        users: vec![10, 50],
        payload_bytes: SIZES.to_vec(),
        repetitions: 1,
    };
    let out = orchestrator::run_matrix(&cfg, &common::exe(), &matrix).await.unwrap();
    let bad = run_failures(&out.runs);
    let elapsed = started.elapsed();
    Verdict::check(
        bad.is_empty() && out.runs.len() == 12 && elapsed < Duration::from_secs(15 * 60),
        format!("{} runs, {} violations {:?}, {:.0}s", out.runs.len(), bad.len(), bad, elapsed.as_secs_f64()),
    )
}

async fn p2() -> Verdict {
    let started = Instant::now();
    let props = tokio::task::spawn_blocking(|| support::broker::interleavings(1000)).await.unwrap();
    support::broker::concurrent_producers().await;
    let acked = common::crash_after_ack().await;
    let elapsed = started.elapsed();
    Verdict::check(
        props.is_ok() && elapsed < Duration::from_secs(300),
        format!(
            "1000 interleavings {:?}; concurrent producers ok; crash-after-ack kept {acked} acked records; {:.0}s",
            props.map(|_| "ok"),
            elapsed.as_secs_f64()
        ),
    )
}

async fn p3() -> Verdict {
    let started = Instant::now();
    support::sync::exactly_once_delivery().await;
    support::faults::cloud_outage().await;
    support::faults::aggregator_crash().await;
    let elapsed = started.elapsed();
    Verdict::check(
        elapsed < Duration::from_secs(300),
        format!(
            "{} writes x {} subscribers exactly-once in version order; no loss across cloud outage and aggregator crash; {:.0}s",
            support::sync::WRITES,
            support::sync::SUBSCRIBERS,
            elapsed.as_secs_f64()
        ),
    )
}

async fn p4() -> Verdict {
    let mut pass = true;
    let mut details = Vec::new();
    for d in [50.0, 250.0, 1000.0] {
        let mut cfg = desk_config(&root().join(format!("p4-d{d}")));
        cfg.cloud.model = CloudModel::default().with_constant_round_trip(d);
        cfg.workload.requests_per_user = 200;
        cfg.workload.interarrival_mean_ms = 50.0;
        cfg.workload.interarrival_sigma_ms = Some(0.0);
        let spec = RunSpec {
            scenario: Scenario::CloudOnly,
            users: 1,
            payload_bytes: 1024,
            rep: 0,
        };
        let out = orchestrator::run_once(&cfg, &common::exe(), spec).await;
        let Some(s) = out.summary else {
            pass = false;
            details.push(format!("D={d}: {:?}", out.error));
            continue;
        };
        let samples = read_samples(&out.dir.join("samples.csv")).unwrap();
        let lo = (d * 1e6) as u64;
        let hi = ((d + 50.0) * 1e6) as u64;
        let inside = samples.iter().filter(|x| (lo..=hi).contains(&x.latency_ns)).count();
        let ok = samples.len() == 200 && inside * 100 >= 99 * samples.len();
        pass &= ok;
        let lat = s.latency.unwrap();
        details.push(format!(
            "D={d}: {inside}/{} in range (min {}, max {})",
            samples.len(),
            fmt_ms(lat.min),
            fmt_ms(lat.max)
        ));
    }
    Verdict::check(pass, details.join("; "))
}

async fn p5() -> Verdict {
    tokio::task::spawn_blocking(|| {
        support::stats::quantiles_match_brute_force();
        support::stats::ecdf_matches_brute_force();
        support::stats::resource_aggregates_match_brute_force();
        support::stats::knee_matches_brute_force();
    })
    .await
    .unwrap();
    Verdict::check(
        true,
        format!(
            "quantiles, ECDF, resource aggregates and knee exact on {} fixtures each",
            support::stats::FIXTURES
        ),
    )
}

type Cells = BTreeMap<(Scenario, usize, u32), RunSummary>;

fn cells(runs: &[RunOutcome]) -> Cells {
    runs.iter()
        .filter_map(|r| r.summary.clone())
        .map(|s| ((s.scenario, s.payload_bytes, s.users), s))
        .collect()
}

fn median(c: &Cells, scenario: Scenario, bytes: usize, users: u32) -> Option<u64> {
    c.get(&(scenario, bytes, users))?.latency.as_ref().map(|l| l.median)
}

const P6_USERS: [u32; 4] = [25, 50, 100, 200];

/// The main trend sweep, shared by P6 and P7.
async fn trend_sweep() -> (Cells, orchestrator::SweepReport, Vec<String>) {
    let mut cfg = desk_config(&root().join("p6"));
    cfg.workload.requests_per_user = 200;
    cfg.agg.drain_timeout_ms = 30_000;
    let matrix = RunMatrix {
        scenarios: Scenario::ALL.to_vec(),
        users: P6_USERS.to_vec(),
        payload_bytes: SIZES.to_vec(),
        repetitions: 1,
    };
    let out = orchestrator::run_matrix(&cfg, &common::exe(), &matrix).await.unwrap();
    (cells(&out.runs), out.report, run_failures(&out.runs))
}

async fn crossover_sweep() -> (Cells, Vec<String>) {
    let mut cfg = desk_config(&root().join("p6b"));
    cfg.workload.requests_per_user = 200;
    cfg.agg.drain_timeout_ms = 30_000;
    cfg.cloud.model.workers = 8;
    let matrix = RunMatrix {
        scenarios: vec![Scenario::CloudOnly, Scenario::EdgeCloud],
        users: P6_USERS.to_vec(),
        payload_bytes: vec![1024],
        repetitions: 1,
    };
    let out = orchestrator::run_matrix(&cfg, &common::exe(), &matrix).await.unwrap();
    (cells(&out.runs), run_failures(&out.runs))
}

fn p6(main: &Cells, report: &orchestrator::SweepReport, crossover: &Cells, failures: &[String]) -> Verdict {
    let lo = P6_USERS[0];
    let hi = P6_USERS[P6_USERS.len() - 1];
    let mut notes = Vec::new();
    let mut a = true;
    for b in SIZES {
        let eo = median(main, Scenario::EdgeOnly, b, lo);
        let ec = median(main, Scenario::EdgeCloud, b, lo);
        let co = median(main, Scenario::CloudOnly, b, lo);
        let ok = matches!((eo, ec, co), (Some(x), Some(y), Some(z)) if x < y && y < z);
        a &= ok;
        notes.push(format!(
            "(a) {b}B U={lo}: edge_only {} < edge_cloud {} < cloud_only {} {}",
            eo.map_or("-".into(), fmt_ms),
            ec.map_or("-".into(), fmt_ms),
            co.map_or("-".into(), fmt_ms),
            if ok { "ok" } else { "VIOLATED" }
        ));
    }
    let m = |s, u| median(crossover, s, 1024, u);
    let b = matches!(
        (m(Scenario::EdgeCloud, lo), m(Scenario::CloudOnly, lo), m(Scenario::EdgeCloud, hi), m(Scenario::CloudOnly, hi)),
        (Some(ec_lo), Some(co_lo), Some(ec_hi), Some(co_hi)) if ec_lo < co_lo && ec_hi > co_hi
    );
    let series: Vec<String> = P6_USERS
        .iter()
        .map(|&u| {
            format!(
                "U={u} ec {} / co {}",
                m(Scenario::EdgeCloud, u).map_or("-".into(), fmt_ms),
                m(Scenario::CloudOnly, u).map_or("-".into(), fmt_ms)
            )
        })
        .collect();
    notes.push(format!("(b) workers=8: {} {}", series.join(", "), if b { "ok" } else { "VIOLATED" }));
    let k1 = report.knee.max_scalable("cloud_only", 1024);
    let k10 = report.knee.max_scalable("cloud_only", 10240);
    let c = matches!((k1, k10), (Some(x), Some(y)) if y < x);
    notes.push(format!(
        "(c) cloud_only knee 1024B={k1:?} 10240B={k10:?} {}",
        if c { "ok" } else { "VIOLATED" }
    ));
    if !failures.is_empty() {
        notes.push(format!("run problems: {failures:?}"));
    }
    Verdict::check(a && b && c && failures.is_empty(), notes.join("; "))
}

fn p7(main: &Cells) -> Verdict {
    let mut pass = true;
    let mut notes = Vec::new();
    let metric = |b: usize, u: u32| -> Option<(f64, f64)> {
        let s = main.get(&(Scenario::EdgeCloud, b, u))?;
        let r = s.resource(COMBINED)?;
        Some((r.net_peak_rate, r.mem_bytes.max))
    };
    for b in SIZES {
        let series: Vec<Option<(f64, f64)>> = P6_USERS.iter().map(|&u| metric(b, u)).collect();
        let complete: Vec<(f64, f64)> = series.iter().flatten().copied().collect();
        let ok = complete.len() == P6_USERS.len()
            && complete.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        pass &= ok;
        notes.push(format!(
            "{b}B net MB/s {:?} mem MB {:?} {}",
            complete.iter().map(|x| (x.0 / 1e5).round() / 10.0).collect::<Vec<_>>(),
            complete.iter().map(|x| (x.1 / 1e5).round() / 10.0).collect::<Vec<_>>(),
            if ok { "non-decreasing" } else { "NOT non-decreasing" }
        ));
    }
    let bigger = P6_USERS.iter().all(|&u| match (metric(1024, u), metric(10240, u)) {
        (Some(s), Some(l)) => l.0 > s.0 && l.1 > s.1,
        _ => false,
    });
    pass &= bigger;
    notes.push(format!("10240B above 1024B at every U: {bigger}"));
    Verdict::check(pass, notes.join("; "))
}

fn journal(dir: &Path) -> Vec<String> {
    std::fs::read_to_string(dir.join("cloud_journal.csv"))
        .unwrap_or_default()
        .lines()
        .map(str::to_string)
        .collect()
}

fn send_log_sans_time(dir: &Path) -> Vec<(u32, u32, String)> {
    read_send_log(&dir.join("send_log.csv"))
        .unwrap_or_default()
        .into_iter()
        .map(|r| (r.user_id, r.seq, format!("{:?}", r.status)))
        .collect()
}

async fn twice(cfg: &Config, spec: RunSpec) -> Result<[PathBuf; 2], String> {
    let mut dirs = Vec::new();
    for i in 0..2 {
        let mut c = cfg.clone();
        c.output.dir = cfg.output.dir.join(format!("exec{i}"));
        let out = orchestrator::run_once(&c, &common::exe(), spec).await;
        if let Some(e) = out.error {
            return Err(e);
        }
        dirs.push(out.dir);
    }
    Ok([dirs[0].clone(), dirs[1].clone()])
}

async fn p8() -> Verdict {
    let mut pass = true;
    let mut notes = Vec::new();

    // a single user against a one-worker, zero-queue cloud: the overload
    // pattern is fixed by the schedule and the service time
    let mut cfg = desk_config(&root().join("p8-overload"));
    cfg.workload.requests_per_user = 50;
    cfg.workload.interarrival_mean_ms = 40.0;
    cfg.workload.interarrival_sigma_ms = Some(0.0);
    cfg.cloud.model = CloudModel {
        workers: 1,
        queue_capacity: 0,
        rest_overhead_ms: 0.0,
        service_ms_base: 180.0,
        service_ms_per_kb: 0.0,
        ..CloudModel::default().with_constant_round_trip(50.0)
    };
    let spec1 = |scenario, users| RunSpec {
        scenario,
        users,
        payload_bytes: 1024,
        rep: 0,
    };
    match twice(&cfg, spec1(Scenario::CloudOnly, 1)).await {
        Ok([a, b]) => {
            let (ja, jb) = (journal(&a), journal(&b));
            let overloads = |j: &[String]| -> BTreeSet<String> {
                j.iter().filter(|l| l.starts_with("overload")).cloned().collect()
            };
            let (la, lb) = (send_log_sans_time(&a), send_log_sans_time(&b));
            let ok = ja == jb && la == lb && !overloads(&ja).is_empty() && overloads(&ja) == overloads(&jb);
            pass &= ok;
            notes.push(format!(
                "cloud_only U=1 overload config: journal identical {}, {} overloads, send log identical {}",
                ja == jb,
                overloads(&ja).len(),
                la == lb
            ));
        }
        Err(e) => {
            pass = false;
            notes.push(format!("overload config: {e}"));
        }
    }

    let mut cfg = desk_config(&root().join("p8-edge-cloud"));
    cfg.workload.requests_per_user = 50;
    match twice(&cfg, spec1(Scenario::EdgeCloud, 1)).await {
        Ok([a, b]) => {
            let ok = journal(&a) == journal(&b) && send_log_sans_time(&a) == send_log_sans_time(&b);
            pass &= ok;
            notes.push(format!("edge_cloud U=1: versions and send log identical {ok}"));
        }
        Err(e) => {
            pass = false;
            notes.push(format!("edge_cloud: {e}"));
        }
    }

    let mut cfg = desk_config(&root().join("p8-multi"));
    cfg.workload.requests_per_user = 50;
    match twice(&cfg, spec1(Scenario::EdgeOnly, 8)).await {
        Ok([a, b]) => {
            let ok = send_log_sans_time(&a) == send_log_sans_time(&b);
            pass &= ok;
            notes.push(format!("edge_only U=8: send log identical {ok}"));
        }
        Err(e) => {
            pass = false;
            notes.push(format!("edge_only U=8: {e}"));
        }
    }
    Verdict::check(pass, notes.join("; "))
}

fn selected() -> Option<BTreeSet<String>> {
    let v = std::env::var("ACCEPTANCE_ONLY").ok()?;
    Some(v.split(',').map(|s| s.trim().to_uppercase()).filter(|s| !s.is_empty()).collect())
}

/// Runs a criterion, turning a panic into a failing verdict.
async fn guarded<F>(f: F) -> Verdict
where
    F: Future<Output = Verdict> + Send + 'static,
{
    match tokio::spawn(f).await {
        Ok(v) => v,
        Err(e) => Verdict::check(false, format!("panicked: {e}")),
    }
}

#[test]
fn acceptance_criteria() {
    let only = selected();
    let want = |id: &str| only.as_ref().is_none_or(|s| s.contains(id));
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .unwrap();
    let _ = std::fs::remove_dir_all(root());
    let mut verdicts: Vec<(&str, Verdict)> = Vec::new();
    rt.block_on(async {
        if want("P1") {
            verdicts.push(("P1", guarded(p1()).await));
        }
        if want("P2") {
            verdicts.push(("P2", guarded(p2()).await));
        }
        if want("P3") {
            verdicts.push(("P3", guarded(p3()).await));
        }
        if want("P4") {
            verdicts.push(("P4", guarded(p4()).await));
        }
        if want("P5") {
            verdicts.push(("P5", guarded(p5()).await));
        }
        if want("P6") || want("P7") {
            let main = tokio::spawn(trend_sweep()).await;
            match main {
                Ok((main, report, failures)) => {
                    if want("P6") {
                        match tokio::spawn(crossover_sweep()).await {
                            Ok((cross, cross_failures)) => {
                                let all: Vec<String> = failures.iter().chain(&cross_failures).cloned().collect();
                                verdicts.push(("P6", p6(&main, &report, &cross, &all)));
                            }
                            Err(e) => verdicts.push(("P6", Verdict::check(false, format!("panicked: {e}")))),
                        }
                    }
                    if want("P7") {
                        verdicts.push(("P7", p7(&main)));
                    }
                }
                Err(e) => {
                    for id in ["P6", "P7"].into_iter().filter(|id| want(id)) {
                        verdicts.push((id, Verdict::check(false, format!("sweep panicked: {e}"))));
                    }
                }
            }
        }
        if want("P8") {
            verdicts.push(("P8", guarded(p8()).await));
        }
    });
    let mut report = String::new();
    for (id, v) in &verdicts {
        report.push_str(&format!("{id} {} {}\n", if v.pass { "PASS" } else { "FAIL" }, v.detail));
    }
    println!("\n{report}");
    let _ = std::fs::create_dir_all(root());
    let _ = std::fs::write(root().join("verdicts.txt"), &report);
    let failed: Vec<&str> = verdicts.iter().filter(|(_, v)| !v.pass).map(|(id, _)| *id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
