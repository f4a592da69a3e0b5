//! Run lifecycle, sweeps and artifacts.
//!
//! Every run starts fresh component processes over wiped scratch state,
//! resets the cloud, checks isolation, samples resources while the tester
//! runs, drains the pipeline and writes:
//!
//! * `samples.csv`, `send_log.csv`, `resources.csv`
//! * `summary.json` (distribution, ECDF, resource aggregates, conservation)
//! * `metadata.json` (every configuration value, seeds, versions)
//! * `cloud_journal.csv` (accepted writes and overloads, in commit order)
//!
//! A sweep additionally writes `comparison.csv`, `sweep.json` and
//! `knee.json` at the top of the output directory.

pub mod launch;

use std::collections::HashSet;
use std::fs;
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::aggregator::{AggregatorConfig, DrainReport};
use crate::broker::{BrokerClient, BrokerConfig};
use crate::clock::{clock_ticks_per_sec, mono_ns};
use crate::cloudsim::proto::Api;
use crate::cloudsim::{CloudConfig, CloudConn, Subscription};
use crate::metrics::{
    aggregate_resources, ecdf, nearest_rank, summarize, DistSummary, KneePoint, KneeReport, ResourceAggregate,
    ResourceSampler, Watched,
};
use crate::metrics::resources::COMBINED;
use crate::metrics::EcdfPoints;
use crate::net::{spawn_stats_writer, NetCounters, StatsFile};
use crate::wire::minimum_payload_bytes;
use crate::workload::{
    conservation, write_samples, write_send_log, Conservation, RecvStats, RunConfig, Scenario, Tester, TopicMode,
};
use launch::Component;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AggSection {
    pub batch_max: u32,
    pub flush_interval_ms: u64,
    pub fetch_max: u32,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    /// Upper bound on the end-of-run drain.
    pub drain_timeout_ms: u64,
}

impl Default for AggSection {
    fn default() -> Self {
        let a = AggregatorConfig::default();
        AggSection {
            batch_max: a.batch_max,
            flush_interval_ms: a.flush_interval_ms,
            fetch_max: a.fetch_max,
            backoff_base_ms: a.backoff_base_ms,
            backoff_max_ms: a.backoff_max_ms,
            drain_timeout_ms: 60_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSection {
    pub scenario: Scenario,
    pub users: u32,
    pub requests_per_user: u32,
    pub interarrival_mean_ms: f64,
    /// Defaults to a tenth of the mean.
    pub interarrival_sigma_ms: Option<f64>,
    pub payload_bytes: usize,
    pub seed: u64,
    pub topic_mode: TopicMode,
    pub cloud_api: Api,
    /// Receiver quiescence grace: the run ends once every acknowledged send
    /// has arrived or nothing arrived for this long.
    pub quiescence_ms: u64,
    /// Samples sent within this many seconds of the run start are left out
    /// of the summary (they still count for conservation).
    pub warmup_discard_s: f64,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        WorkloadSection {
            scenario: Scenario::EdgeOnly,
            users: 100,
            requests_per_user: 1000,
            interarrival_mean_ms: 1000.0,
            interarrival_sigma_ms: None,
            payload_bytes: 1024,
            seed: 1,
            topic_mode: TopicMode::Single,
            cloud_api: Api::Rest,
            quiescence_ms: 10_000,
            warmup_discard_s: 0.0,
        }
    }
}

impl WorkloadSection {
    pub fn sigma(&self) -> f64 {
        self.interarrival_sigma_ms.unwrap_or(self.interarrival_mean_ms / 10.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub scenarios: Vec<Scenario>,
    pub users: Vec<u32>,
    pub payload_bytes: Vec<usize>,
    pub repetitions: u32,
    pub knee_threshold_ms: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            scenarios: Scenario::ALL.to_vec(),
            users: (1..=10).map(|k| k * 100).collect(),
            payload_bytes: vec![1024, 10240],
            repetitions: 1,
            knee_threshold_ms: 10_000.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Pause between consecutive runs of a sweep.
    pub settle_ms: u64,
    pub sample_interval_ms: u64,
    /// Broker data and aggregator queues; defaults to `<dir>/.scratch`.
    pub scratch_dir: Option<PathBuf>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("results"),
            settle_ms: 3000,
            sample_interval_ms: 1000,
            scratch_dir: None,
        }
    }
}

/// The whole configuration document.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub broker: BrokerConfig,
    pub cloud: CloudConfig,
    pub agg: AggSection,
    pub workload: WorkloadSection,
    pub sweep: SweepSection,
    pub output: OutputSection,
}

impl Config {
    pub fn load(path: &Path) -> io::Result<Config> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))
    }

    pub fn scratch_dir(&self) -> PathBuf {
        self.output
            .scratch_dir
            .clone()
            .unwrap_or_else(|| self.output.dir.join(".scratch"))
    }

    pub fn validate(&self) -> Result<(), String> {
        self.cloud.model.validate().map_err(|e| e.to_string())?;
        let w = &self.workload;
        if w.users == 0 || w.requests_per_user == 0 {
            return Err("workload.users and workload.requests_per_user must be >= 1".into());
        }
        if !(w.interarrival_mean_ms.is_finite() && w.interarrival_mean_ms > 0.0 && w.sigma().is_finite() && w.sigma() >= 0.0) {
            return Err("inter-arrival mean must be > 0 and sigma >= 0".into());
        }
        let min = minimum_payload_bytes();
        if let Some(b) = std::iter::once(w.payload_bytes)
            .chain(self.sweep.payload_bytes.iter().copied())
            .find(|&b| b < min)
        {
            return Err(format!("payload_bytes {b} is below the wire minimum {min}"));
        }
        if self.sweep.users.contains(&0) {
            return Err("sweep.users must be >= 1".into());
        }
        Ok(())
    }
}

/// One cell of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RunSpec {
    pub scenario: Scenario,
    pub users: u32,
    pub payload_bytes: usize,
    pub rep: u32,
}

impl RunSpec {
    pub fn run_id(&self) -> String {
        format!("{}-u{}-b{}-r{}", self.scenario, self.users, self.payload_bytes, self.rep)
    }
}

/// scenarios × user counts × payload sizes × repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMatrix {
    pub scenarios: Vec<Scenario>,
    pub users: Vec<u32>,
    pub payload_bytes: Vec<usize>,
    pub repetitions: u32,
}

impl RunMatrix {
    pub fn from_sweep(s: &SweepSection) -> RunMatrix {
        RunMatrix {
            scenarios: s.scenarios.clone(),
            users: s.users.clone(),
            payload_bytes: s.payload_bytes.clone(),
            repetitions: s.repetitions,
        }
    }

    /// Cells in execution order, duplicates removed.
    pub fn cells(&self) -> Vec<RunSpec> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for &scenario in &self.scenarios {
            for &payload_bytes in &self.payload_bytes {
                for &users in &self.users {
                    for rep in 0..self.repetitions {
                        let spec = RunSpec {
                            scenario,
                            users,
                            payload_bytes,
                            rep,
                        };
                        if seen.insert(spec) {
                            out.push(spec);
                        }
                    }
                }
            }
        }
        out
    }
}

/// Seed of repetition `rep` derived from a base seed.
pub fn rep_seed(base: u64, rep: u32) -> u64 {
    base.wrapping_add(rep as u64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Isolation {
    pub broker_empty_at_start: bool,
    pub cloud_empty_at_start: bool,
    /// Bytes the broker received during the workload (0 expected in cloud_only).
    pub broker_bytes_in_run: u64,
    /// Bytes the cloud received during the workload (0 expected in edge_only).
    pub cloud_bytes_in_run: u64,
    pub ok: bool,
}

/// Per-run summary file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub scenario: Scenario,
    pub users: u32,
    pub payload_bytes: usize,
    pub rep: u32,
    pub valid: bool,
    pub latency: Option<DistSummary>,
    pub ecdf: Option<EcdfPoints>,
    pub resources: Vec<ResourceAggregate>,
    pub conservation: Conservation,
    pub isolation: Isolation,
    pub drain: Option<DrainReport>,
    pub recv: RecvStats,
    pub samples_discarded_warmup: usize,
}

impl RunSummary {
    pub fn resource(&self, component: &str) -> Option<&ResourceAggregate> {
        self.resources.iter().find(|r| r.component == component)
    }

    pub fn combined(&self) -> Option<&ResourceAggregate> {
        self.resource(COMBINED)
    }
}

/// Result of one `run_once`.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub spec: RunSpec,
    pub dir: PathBuf,
    pub summary: Option<RunSummary>,
    pub error: Option<String>,
}

impl RunOutcome {
    pub fn valid(&self) -> bool {
        self.error.is_none() && self.summary.as_ref().is_some_and(|s| s.valid)
    }
}

/// Keys every metadata file must carry (JSON pointers).
pub const REQUIRED_METADATA_KEYS: &[&str] = &[
    "/run_id",
    "/versions/edgebench",
    "/seeds/workload",
    "/seeds/cloud",
    "/run/scenario",
    "/run/users",
    "/run/requests_per_user",
    "/run/interarrival_mean_ms",
    "/run/interarrival_sigma_ms",
    "/run/payload_bytes",
    "/run/topic_mode",
    "/config/broker/port",
    "/config/broker/data_dir",
    "/config/broker/flush_every",
    "/config/broker/fsync",
    "/config/cloud/port",
    "/config/cloud/model/workers",
    "/config/cloud/model/service_ms_base",
    "/config/cloud/model/service_ms_per_kb",
    "/config/cloud/model/rest_overhead_ms",
    "/config/cloud/model/queue_capacity",
    "/config/cloud/model/wan_mu",
    "/config/cloud/model/wan_sigma",
    "/config/cloud/model/wan_enabled",
    "/config/cloud/model/rng_seed",
    "/config/agg/batch_max",
    "/config/agg/flush_interval_ms",
    "/config/agg/backoff_base_ms",
    "/config/agg/backoff_max_ms",
    "/config/workload/quiescence_ms",
    "/config/workload/warmup_discard_s",
    "/config/workload/cloud_api",
    "/config/sweep/knee_threshold_ms",
    "/config/output/dir",
    "/config/output/settle_ms",
    "/config/output/sample_interval_ms",
    "/conventions/quantiles",
    "/conventions/net_io",
    "/conventions/memory",
    "/conservation/holds",
    "/valid",
];

pub fn missing_metadata_keys(meta: &Value) -> Vec<&'static str> {
    REQUIRED_METADATA_KEYS
        .iter()
        .copied()
        .filter(|k| meta.pointer(k).is_none())
        .collect()
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> io::Result<()> {
    fs::write(path, serde_json::to_vec_pretty(v)?)
}

fn reset_dir(dir: &Path) -> io::Result<()> {
    match fs::remove_dir_all(dir) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::NotFound => {}
        Err(e) => return Err(e),
    }
    fs::create_dir_all(dir)
}

fn read_net_in(path: &Path) -> u64 {
    StatsFile::read(path).map(|s| s.net_in).unwrap_or(0)
}

const STATS_SETTLE: Duration = Duration::from_millis(300);
const STOP_TIMEOUT: Duration = Duration::from_secs(10);

/// Runs one cell end to end.
pub async fn run_once(cfg: &Config, exe: &Path, spec: RunSpec) -> RunOutcome {
    let run_id = spec.run_id();
    let dir = cfg.output.dir.join(&run_id);
    let result = match reset_dir(&dir) {
        Ok(()) => run_inner(cfg, exe, spec, &dir).await,
        Err(e) => Err(format!("output dir {}: {e}", dir.display())),
    };
    match result {
        Ok(summary) => RunOutcome {
            spec,
            dir,
            summary: Some(summary),
            error: None,
        },
        Err(error) => {
            let _ = write_json(&dir.join("error.json"), &json!({ "run_id": run_id, "error": error }));
            RunOutcome {
                spec,
                dir,
                summary: None,
                error: Some(error),
            }
        }
    }
}

fn err<E: std::fmt::Display>(ctx: &'static str) -> impl Fn(E) -> String {
    move |e| format!("{ctx}: {e}")
}

async fn check_empty(broker: SocketAddr, cloud: SocketAddr, topics: &[String]) -> Result<(bool, bool), String> {
    let net = NetCounters::new();
    let mut b = BrokerClient::connect(broker, net.clone()).await.map_err(err("broker connect"))?;
    let mut broker_empty = true;
    for t in topics {
        let r = b.fetch(t, 0, 1, Duration::ZERO).await.map_err(err("broker fetch"))?;
        broker_empty &= r.next_offset == 0 && r.records.is_empty();
    }
    let conn = CloudConn::connect(cloud, net.clone()).await.map_err(err("cloud connect"))?;
    conn.reset().await.map_err(err("cloud reset"))?;
    let mut sub = Subscription::open(cloud, "orchestrator", "", net).await.map_err(err("cloud subscribe"))?;
    let snap = tokio::time::timeout(Duration::from_secs(30), sub.next())
        .await
        .map_err(err("cloud snapshot"))?
        .map_err(err("cloud snapshot"))?
        .ok_or("cloud closed the subscription")?;
    let cloud_empty = snap.value.get() == "{}";
    Ok((broker_empty, cloud_empty))
}

async fn run_inner(cfg: &Config, exe: &Path, spec: RunSpec, dir: &Path) -> Result<RunSummary, String> {
    let run_id = spec.run_id();
    let scratch = cfg.scratch_dir().join(&run_id);
    reset_dir(&scratch).map_err(err("scratch dir"))?;
    let seed = rep_seed(cfg.workload.seed, spec.rep);
    let cloud_seed = rep_seed(cfg.cloud.model.rng_seed, spec.rep);
    let topics = cfg.workload.topic_mode.topics(spec.users);

    let mut broker_cfg = cfg.broker.clone();
    broker_cfg.data_dir = scratch.join("broker-data");
    let mut cloud_cfg = cfg.cloud.clone();
    cloud_cfg.model.rng_seed = cloud_seed;
    write_json(&scratch.join("broker.json"), &broker_cfg).map_err(err("write config"))?;
    write_json(&scratch.join("cloud.json"), &cloud_cfg).map_err(err("write config"))?;

    let journal = dir.join("cloud_journal.csv");
    let journal_s = journal.to_string_lossy().to_string();
    let cloud = Component::launch(
        exe,
        "cloud",
        &scratch.join("cloud.json"),
        &scratch.join("cloud.stats"),
        &["--journal", &journal_s],
        &scratch.join("cloud.log"),
    )
    .await
    .map_err(err("start cloud"))?;
    let broker = Component::launch(
        exe,
        "broker",
        &scratch.join("broker.json"),
        &scratch.join("broker.stats"),
        &[],
        &scratch.join("broker.log"),
    )
    .await
    .map_err(err("start broker"))?;
    let broker_addr = broker.addr.ok_or("broker did not report an address")?;
    let cloud_addr = cloud.addr.ok_or("cloud did not report an address")?;

    let (broker_empty, cloud_empty) = check_empty(broker_addr, cloud_addr, &topics).await?;

    let mut aggregator = None;
    if spec.scenario == Scenario::EdgeCloud {
        let a = &cfg.agg;
        let agg_cfg = AggregatorConfig {
            broker_addr,
            cloud_addr,
            topics: topics.clone(),
            batch_max: a.batch_max,
            flush_interval_ms: a.flush_interval_ms,
            queue_dir: scratch.join("agg-queue"),
            fetch_max: a.fetch_max,
            backoff_base_ms: a.backoff_base_ms,
            backoff_max_ms: a.backoff_max_ms,
        };
        write_json(&scratch.join("aggregator.json"), &agg_cfg).map_err(err("write config"))?;
        aggregator = Some(
            Component::launch(
                exe,
                "aggregator",
                &scratch.join("aggregator.json"),
                &scratch.join("aggregator.stats"),
                &[],
                &scratch.join("aggregator.log"),
            )
            .await
            .map_err(err("start aggregator"))?,
        );
    }

    let tester_net = NetCounters::new();
    let tester_stats = scratch.join("workload.stats");
    let tester_stats_task = spawn_stats_writer(tester_stats.clone(), tester_net.clone(), Duration::from_millis(200));
    let mut watched = vec![
        Watched {
            component: "broker".into(),
            pid: broker.pid,
            stats: Some(broker.stats_path.clone()),
        },
        Watched {
            component: "cloudsim".into(),
            pid: cloud.pid,
            stats: Some(cloud.stats_path.clone()),
        },
    ];
    if let Some(a) = &aggregator {
        watched.push(Watched {
            component: "aggregator".into(),
            pid: a.pid,
            stats: Some(a.stats_path.clone()),
        });
    }
    watched.push(Watched {
        component: "workload".into(),
        pid: std::process::id(),
        stats: Some(tester_stats),
    });

    tokio::time::sleep(STATS_SETTLE).await;
    let broker_in0 = read_net_in(&broker.stats_path);
    let cloud_in0 = read_net_in(&cloud.stats_path);

    let sampler = ResourceSampler::start(
        run_id.clone(),
        watched,
        Duration::from_millis(cfg.output.sample_interval_ms.max(1)),
        &dir.join("resources.csv"),
    )
    .map_err(err("resource sampler"))?;

    let w = &cfg.workload;
    let run_cfg = RunConfig {
        run_id: run_id.clone(),
        scenario: spec.scenario,
        users: spec.users,
        requests_per_user: w.requests_per_user,
        interarrival_mean_ms: w.interarrival_mean_ms,
        interarrival_sigma_ms: w.sigma(),
        payload_bytes: spec.payload_bytes,
        seed,
        topic_mode: w.topic_mode,
        cloud_api: w.cloud_api,
        broker_addr: Some(broker_addr),
        cloud_addr: Some(cloud_addr),
    };
    let started = mono_ns();
    let mut tester = Tester::start(run_cfg.clone(), tester_net.clone())
        .await
        .map_err(err("tester"))?;
    tester.send_all().await;
    let sent_done = mono_ns();

    let mut drain = None;
    if let Some(mut a) = aggregator.take() {
        a.command(&format!("drain {}", cfg.agg.drain_timeout_ms))
            .await
            .map_err(err("aggregator drain"))?;
        let line = a
            .expect_line("DRAINED", Duration::from_millis(cfg.agg.drain_timeout_ms) + Duration::from_secs(15))
            .await
            .map_err(err("aggregator drain"))?;
        drain = Some(serde_json::from_str::<DrainReport>(&line).map_err(err("drain report"))?);
        aggregator = Some(a);
    }
    tester.await_quiescence(Duration::from_millis(w.quiescence_ms)).await;
    let finished = mono_ns();

    tokio::time::sleep(STATS_SETTLE).await;
    let rows = sampler.stop().await.map_err(err("resource sampler"))?;
    tester_stats_task.abort();
    let broker_in1 = read_net_in(&broker.stats_path);
    let cloud_in1 = read_net_in(&cloud.stats_path);
    let out = tester.finish().await;

    if let Some(a) = aggregator {
        a.stop(STOP_TIMEOUT).await.map_err(err("aggregator stop"))?;
    }
    broker.stop(STOP_TIMEOUT).await.map_err(err("broker stop"))?;
    cloud.stop(STOP_TIMEOUT).await.map_err(err("cloud stop"))?;

    let cons = conservation(spec.users, w.requests_per_user, &out.send_log, &out.samples, out.recv.duplicates);
    let broker_bytes_in_run = broker_in1.saturating_sub(broker_in0);
    let cloud_bytes_in_run = cloud_in1.saturating_sub(cloud_in0);
    let isolation = Isolation {
        broker_empty_at_start: broker_empty,
        cloud_empty_at_start: cloud_empty,
        broker_bytes_in_run,
        cloud_bytes_in_run,
        ok: broker_empty
            && cloud_empty
            && match spec.scenario {
                Scenario::CloudOnly => broker_bytes_in_run == 0,
                Scenario::EdgeOnly => cloud_bytes_in_run == 0,
                Scenario::EdgeCloud => true,
            },
    };

    let warmup_ns = (w.warmup_discard_s.max(0.0) * 1e9) as u64;
    let kept: Vec<u64> = out
        .samples
        .iter()
        .filter(|s| s.sent_ns >= out.start_ns + warmup_ns)
        .map(|s| s.latency_ns)
        .collect();
    let summary = RunSummary {
        run_id: run_id.clone(),
        scenario: spec.scenario,
        users: spec.users,
        payload_bytes: spec.payload_bytes,
        rep: spec.rep,
        valid: cons.holds && isolation.ok,
        latency: summarize(&kept).ok(),
        ecdf: ecdf(&kept).ok().map(|e| e.downsample(512)),
        resources: aggregate_resources(&rows).unwrap_or_default(),
        conservation: cons,
        isolation,
        drain,
        recv: out.recv,
        samples_discarded_warmup: out.samples.len() - kept.len(),
    };

    write_samples(&dir.join("samples.csv"), &run_id, spec.users, &out.samples).map_err(err("write samples"))?;
    write_send_log(&dir.join("send_log.csv"), &run_id, &out.send_log).map_err(err("write send log"))?;
    write_json(&dir.join("summary.json"), &summary).map_err(err("write summary"))?;
    let meta = json!({
        "run_id": run_id,
        "spec": spec,
        "versions": { "edgebench": env!("CARGO_PKG_VERSION") },
        "seeds": { "workload": seed, "cloud": cloud_seed },
        "run": run_cfg,
        "config": cfg,
        "component_configs": {
            "broker": broker_cfg,
            "cloud": cloud_cfg,
        },
        "conventions": {
            "quantiles": "nearest-rank on sorted latencies",
            "density": "gaussian kde over log10(latency ms), silverman bandwidth",
            "net_io": "application-level frame bytes counted by each component; excludes TCP/IP overhead",
            "memory": "per-second peak of sampled VmRSS",
            "clock": "CLOCK_MONOTONIC nanoseconds, shared by sender and receiver",
        },
        "host": {
            "clock_ticks_per_sec": clock_ticks_per_sec(),
            "cpus": std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        },
        "timing_ms": {
            "send_phase": (sent_done - started) as f64 / 1e6,
            "total": (finished - started) as f64 / 1e6,
        },
        "conservation": cons,
        "isolation": isolation,
        "drain": drain,
        "recv": out.recv,
        "valid": summary.valid,
    });
    write_json(&dir.join("metadata.json"), &meta).map_err(err("write metadata"))?;
    let _ = fs::remove_dir_all(&scratch);
    Ok(summary)
}

/// One row of the scenario comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub scenario: Scenario,
    pub payload_bytes: usize,
    pub users: u32,
    pub reps: usize,
    pub valid_reps: usize,
    /// Nearest-rank median of the per-repetition medians.
    pub median_ms: f64,
    pub median_min_ms: f64,
    pub median_max_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<CellRow>,
    pub knee: KneeReport,
    pub failed_runs: Vec<String>,
}

fn ns_ms(ns: u64) -> f64 {
    ns as f64 / 1e6
}

/// Builds the comparison table and knee report from run summaries.
pub fn build_report(summaries: &[RunSummary], failed_runs: Vec<String>, threshold_ms: f64) -> SweepReport {
    let mut keys: Vec<(Scenario, usize, u32)> = summaries.iter().map(|s| (s.scenario, s.payload_bytes, s.users)).collect();
    keys.sort();
    keys.dedup();
    let mut cells = Vec::new();
    for (scenario, payload_bytes, users) in keys {
        let group: Vec<&RunSummary> = summaries
            .iter()
            .filter(|s| s.scenario == scenario && s.payload_bytes == payload_bytes && s.users == users)
            .collect();
        let lat: Vec<&DistSummary> = group.iter().filter_map(|s| s.latency.as_ref()).collect();
        if lat.is_empty() {
            continue;
        }
        let mut medians: Vec<u64> = lat.iter().map(|l| l.median).collect();
        medians.sort_unstable();
        let mut p99s: Vec<u64> = lat.iter().map(|l| l.p99).collect();
        p99s.sort_unstable();
        cells.push(CellRow {
            scenario,
            payload_bytes,
            users,
            reps: group.len(),
            valid_reps: group.iter().filter(|s| s.valid).count(),
            median_ms: ns_ms(nearest_rank(&medians, 5000)),
            median_min_ms: ns_ms(medians[0]),
            median_max_ms: ns_ms(medians[medians.len() - 1]),
            p99_ms: ns_ms(nearest_rank(&p99s, 5000)),
            max_ms: ns_ms(lat.iter().map(|l| l.max).max().unwrap_or(0)),
        });
    }
    let knee_cells: Vec<(String, usize, KneePoint)> = cells
        .iter()
        .map(|c| {
            (
                c.scenario.to_string(),
                c.payload_bytes,
                KneePoint {
                    users: c.users,
                    median_ms: c.median_ms,
                    p99_ms: c.p99_ms,
                    max_ms: c.max_ms,
                },
            )
        })
        .collect();
    SweepReport {
        knee: KneeReport::build(threshold_ms, &knee_cells),
        cells,
        failed_runs,
    }
}

pub fn write_report(dir: &Path, report: &SweepReport) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("sweep.json"), report)?;
    write_json(&dir.join("knee.json"), &report.knee)?;
    let mut w = csv::Writer::from_path(dir.join("comparison.csv"))?;
    if report.cells.is_empty() {
        w.write_record([
            "scenario",
            "payload_bytes",
            "users",
            "reps",
            "valid_reps",
            "median_ms",
            "median_min_ms",
            "median_max_ms",
            "p99_ms",
            "max_ms",
        ])?;
    }
    for c in &report.cells {
        w.serialize(c)?;
    }
    w.flush()
}

/// Result of a sweep.
pub struct SweepOutcome {
    pub runs: Vec<RunOutcome>,
    pub report: SweepReport,
}

impl SweepOutcome {
    pub fn all_valid(&self) -> bool {
        self.runs.iter().all(RunOutcome::valid)
    }
}

/// Executes every cell sequentially, then writes the sweep report.
pub async fn run_matrix(cfg: &Config, exe: &Path, matrix: &RunMatrix) -> io::Result<SweepOutcome> {
    fs::create_dir_all(&cfg.output.dir)?;
    let cells = matrix.cells();
    let mut runs = Vec::with_capacity(cells.len());
    for (i, spec) in cells.iter().enumerate() {
        if i > 0 {
            tokio::time::sleep(Duration::from_millis(cfg.output.settle_ms)).await;
        }
        tracing::info!("run {}/{}: {}", i + 1, cells.len(), spec.run_id());
        let outcome = run_once(cfg, exe, *spec).await;
        match (&outcome.error, &outcome.summary) {
            (Some(e), _) => tracing::error!("{}: {e}", spec.run_id()),
            (None, Some(s)) if !s.valid => tracing::warn!("{}: marked invalid", spec.run_id()),
            _ => {}
        }
        runs.push(outcome);
    }
    let summaries: Vec<RunSummary> = runs.iter().filter_map(|r| r.summary.clone()).collect();
    let failed: Vec<String> = runs
        .iter()
        .filter(|r| r.error.is_some())
        .map(|r| r.spec.run_id())
        .collect();
    let report = build_report(&summaries, failed, cfg.sweep.knee_threshold_ms);
    write_report(&cfg.output.dir, &report)?;
    let _ = fs::remove_dir(cfg.scratch_dir());
    Ok(SweepOutcome { runs, report })
}

/// Rebuilds the sweep report from the run directories under `dir`.
pub fn report_dir(dir: &Path, threshold_ms: f64) -> io::Result<SweepReport> {
    let mut summaries = Vec::new();
    let mut failed = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for run in entries {
        let summary = run.join("summary.json");
        if summary.exists() {
            let s: RunSummary = serde_json::from_slice(&fs::read(&summary)?)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", summary.display())))?;
            summaries.push(s);
        } else if run.join("error.json").exists() {
            failed.push(run.file_name().unwrap_or_default().to_string_lossy().to_string());
        }
    }
    let report = build_report(&summaries, failed, threshold_ms);
    write_report(dir, &report)?;
    Ok(report)
}
