//! Open-loop load generator.
//!
//! Each simulated user sends `requests_per_user` canonical payloads on an
//! absolute schedule of normally distributed inter-arrival gaps. Sends never
//! wait for end-to-end delivery; a single receiver timestamps arrivals on
//! the same host clock and turns them into latency samples.

mod tester;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io;
use std::net::SocketAddr;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloudsim::proto::Api;
use crate::wire::{minimum_payload_bytes, splitmix64, MsgId, DEFAULT_TOPIC};

pub use tester::{RecvStats, Tester, TesterOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    CloudOnly,
    EdgeOnly,
    EdgeCloud,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::CloudOnly, Scenario::EdgeOnly, Scenario::EdgeCloud];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::CloudOnly => "cloud_only",
            Scenario::EdgeOnly => "edge_only",
            Scenario::EdgeCloud => "edge_cloud",
        }
    }

    pub fn uses_broker(&self) -> bool {
        *self != Scenario::CloudOnly
    }

    pub fn uses_cloud(&self) -> bool {
        *self != Scenario::EdgeOnly
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> Result<Scenario, String> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| format!("unknown scenario {s:?} (expected cloud_only, edge_only or edge_cloud)"))
    }
}

/// Broker topic layout used by the senders.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopicMode {
    #[default]
    Single,
    PerUser,
}

impl TopicMode {
    pub fn topic_for(&self, user_id: u32) -> String {
        match self {
            TopicMode::Single => DEFAULT_TOPIC.to_string(),
            TopicMode::PerUser => format!("{DEFAULT_TOPIC}-u{user_id:06}"),
        }
    }

    pub fn topics(&self, users: u32) -> Vec<String> {
        match self {
            TopicMode::Single => vec![DEFAULT_TOPIC.to_string()],
            TopicMode::PerUser => (0..users).map(|u| self.topic_for(u)).collect(),
        }
    }
}

/// Everything the tester needs for one run. Component settings (cloud model,
/// broker flushing, output paths) live in the orchestrator configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub run_id: String,
    pub scenario: Scenario,
    pub users: u32,
    pub requests_per_user: u32,
    pub interarrival_mean_ms: f64,
    pub interarrival_sigma_ms: f64,
    pub payload_bytes: usize,
    pub seed: u64,
    pub topic_mode: TopicMode,
    /// How cloud_only senders talk to the cloud.
    pub cloud_api: Api,
    pub broker_addr: Option<SocketAddr>,
    pub cloud_addr: Option<SocketAddr>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("users must be >= 1")]
    NoUsers,
    #[error("requests_per_user must be >= 1")]
    NoRequests,
    #[error("interarrival_mean_ms must be > 0")]
    Mean,
    #[error("interarrival_sigma_ms must be >= 0")]
    Sigma,
    #[error("payload_bytes {0} is below the wire minimum {1}")]
    Payload(usize, usize),
    #[error("scenario {0} needs a {1} address")]
    Endpoint(Scenario, &'static str),
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.users == 0 {
            return Err(ConfigError::NoUsers);
        }
        if self.requests_per_user == 0 {
            return Err(ConfigError::NoRequests);
        }
        if !(self.interarrival_mean_ms.is_finite() && self.interarrival_mean_ms > 0.0) {
            return Err(ConfigError::Mean);
        }
        if !(self.interarrival_sigma_ms.is_finite() && self.interarrival_sigma_ms >= 0.0) {
            return Err(ConfigError::Sigma);
        }
        let min = minimum_payload_bytes();
        if self.payload_bytes < min {
            return Err(ConfigError::Payload(self.payload_bytes, min));
        }
        match self.scenario {
            Scenario::CloudOnly if self.cloud_addr.is_none() => Err(ConfigError::Endpoint(self.scenario, "cloud")),
            Scenario::EdgeOnly if self.broker_addr.is_none() => Err(ConfigError::Endpoint(self.scenario, "broker")),
            Scenario::EdgeCloud if self.broker_addr.is_none() => Err(ConfigError::Endpoint(self.scenario, "broker")),
            Scenario::EdgeCloud if self.cloud_addr.is_none() => Err(ConfigError::Endpoint(self.scenario, "cloud")),
            _ => Ok(()),
        }
    }

    pub fn expected(&self) -> u64 {
        self.users as u64 * self.requests_per_user as u64
    }
}

/// One inter-arrival gap: Normal(mean, sigma) truncated at zero by redrawing.
pub fn next_interarrival<R: rand::Rng + ?Sized>(rng: &mut R, mean_ms: f64, sigma_ms: f64) -> f64 {
    if sigma_ms == 0.0 {
        return mean_ms;
    }
    let normal = Normal::new(mean_ms, sigma_ms).expect("finite parameters");
    loop {
        let x = normal.sample(rng);
        if x >= 0.0 {
            return x;
        }
    }
}

/// Per-user random stream of the workload.
pub fn user_rng(seed: u64, user_id: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(0x5ca1_ab1e ^ user_id as u64)))
}

/// Send instants of one user in milliseconds after the run start. The
/// first send is offset by a uniform draw in `[0, mean)` so users do not
/// fire in lockstep (zero when sigma is zero); each later send follows the
/// previous one by an inter-arrival draw.
pub fn schedule(cfg: &RunConfig, user_id: u32) -> Vec<f64> {
    use rand::Rng;
    let mut rng = user_rng(cfg.seed, user_id);
    let mut t = if cfg.interarrival_sigma_ms > 0.0 {
        rng.random_range(0.0..cfg.interarrival_mean_ms)
    } else {
        0.0
    };
    let mut out = Vec::with_capacity(cfg.requests_per_user as usize);
    for seq in 0..cfg.requests_per_user {
        if seq > 0 {
            t += next_interarrival(&mut rng, cfg.interarrival_mean_ms, cfg.interarrival_sigma_ms);
        }
        out.push(t);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SendStatus {
    Ok,
    Overload,
    Error,
}

/// One send-log entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SendRecord {
    pub user_id: u32,
    pub seq: u32,
    pub sent_ns: u64,
    pub status: SendStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencySample {
    pub msg_id: MsgId,
    pub user_id: u32,
    pub seq: u32,
    pub sent_ns: u64,
    pub recv_ns: u64,
    pub latency_ns: u64,
    pub scenario: Scenario,
    pub payload_bytes: usize,
}

/// Accounting identity of a run: every issued request is a sample, a send
/// error, or unreceived.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conservation {
    pub expected: u64,
    pub samples: u64,
    pub send_errors: u64,
    pub unreceived: u64,
    pub duplicates: u64,
    /// Samples that do not belong to any issued request.
    pub unexpected: u64,
    pub holds: bool,
}

pub fn conservation(
    users: u32,
    requests_per_user: u32,
    send_log: &[SendRecord],
    samples: &[LatencySample],
    duplicates: u64,
) -> Conservation {
    let expected = users as u64 * requests_per_user as u64;
    let status: HashMap<(u32, u32), SendStatus> =
        send_log.iter().map(|r| ((r.user_id, r.seq), r.status)).collect();
    let mut got: HashSet<(u32, u32)> = HashSet::with_capacity(samples.len());
    let mut unexpected = 0u64;
    let mut dup_pairs = 0u64;
    for s in samples {
        if s.user_id >= users || s.seq >= requests_per_user {
            unexpected += 1;
        } else if !got.insert((s.user_id, s.seq)) {
            dup_pairs += 1;
        }
    }
    let mut send_errors = 0u64;
    let mut unreceived = 0u64;
    for u in 0..users {
        for q in 0..requests_per_user {
            if got.contains(&(u, q)) {
                continue;
            }
            match status.get(&(u, q)) {
                Some(SendStatus::Ok) => unreceived += 1,
                _ => send_errors += 1,
            }
        }
    }
    let samples_n = got.len() as u64;
    let duplicates = duplicates + dup_pairs;
    Conservation {
        expected,
        samples: samples_n,
        send_errors,
        unreceived,
        duplicates,
        unexpected,
        holds: samples_n + send_errors + unreceived == expected && duplicates == 0 && unexpected == 0,
    }
}

#[derive(Serialize, Deserialize)]
struct SampleRow {
    run_id: String,
    scenario: Scenario,
    payload_bytes: usize,
    users: u32,
    user_id: u32,
    seq: u32,
    msg_id: MsgId,
    sent_ns: u64,
    recv_ns: u64,
    latency_ns: u64,
}

pub fn write_samples(path: &Path, run_id: &str, users: u32, samples: &[LatencySample]) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in samples {
        w.serialize(SampleRow {
            run_id: run_id.to_string(),
            scenario: s.scenario,
            payload_bytes: s.payload_bytes,
            users,
            user_id: s.user_id,
            seq: s.seq,
            msg_id: s.msg_id,
            sent_ns: s.sent_ns,
            recv_ns: s.recv_ns,
            latency_ns: s.latency_ns,
        })?;
    }
    if samples.is_empty() {
        w.write_record([
            "run_id",
            "scenario",
            "payload_bytes",
            "users",
            "user_id",
            "seq",
            "msg_id",
            "sent_ns",
            "recv_ns",
            "latency_ns",
        ])?;
    }
    w.flush()
}

pub fn read_samples(path: &Path) -> io::Result<Vec<LatencySample>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<SampleRow>()
        .map(|row| {
            let row = row?;
            Ok(LatencySample {
                msg_id: row.msg_id,
                user_id: row.user_id,
                seq: row.seq,
                sent_ns: row.sent_ns,
                recv_ns: row.recv_ns,
                latency_ns: row.latency_ns,
                scenario: row.scenario,
                payload_bytes: row.payload_bytes,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct SendRow {
    run_id: String,
    user_id: u32,
    seq: u32,
    sent_ns: u64,
    status: SendStatus,
}

pub fn write_send_log(path: &Path, run_id: &str, log: &[SendRecord]) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in log {
        w.serialize(SendRow {
            run_id: run_id.to_string(),
            user_id: r.user_id,
            seq: r.seq,
            sent_ns: r.sent_ns,
            status: r.status,
        })?;
    }
    if log.is_empty() {
        w.write_record(["run_id", "user_id", "seq", "sent_ns", "status"])?;
    }
    w.flush()
}

pub fn read_send_log(path: &Path) -> io::Result<Vec<SendRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<SendRow>()
        .map(|row| {
            let row = row?;
            Ok(SendRecord {
                user_id: row.user_id,
                seq: row.seq,
                sent_ns: row.sent_ns,
                status: row.status,
            })
        })
        .collect()
}
