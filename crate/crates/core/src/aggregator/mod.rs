//! Edge-to-cloud bridge.
//!
//! Consumes broker topics, stages every record in a durable local queue,
//! commits the consumer offset once the record is staged, and writes staged
//! records to the cloud emulator with a bounded window of concurrent puts.
//! Failed puts are retried with jittered exponential backoff; the cloud
//! deduplicates by msg_id so a record may safely be sent more than once.

pub mod queue;

use std::collections::HashMap;
use std::io;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use tokio::sync::{watch, Notify};
use tokio::task::JoinSet;

use crate::broker::BrokerClient;
use crate::cloudsim::proto::{Api, OVERLOAD};
use crate::cloudsim::CloudConn;
use crate::net::NetCounters;
use crate::wire::{parse_payload, DEFAULT_TOPIC};
use queue::{QueueEntry, SyncQueue, Ticket};

/// Consumer group the aggregator commits under.
pub const GROUP: &str = "aggregator";
/// Root of the cloud tree the aggregator writes into.
pub const CLOUD_ROOT: &str = "runs";

/// Cloud path of one record.
pub fn identification_path(user_id: u32, seq: u32) -> String {
    format!("{CLOUD_ROOT}/u{user_id:06}/{seq:06}")
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorConfig {
    pub broker_addr: SocketAddr,
    pub cloud_addr: SocketAddr,
    pub topics: Vec<String>,
    /// Maximum concurrent puts in flight.
    pub batch_max: u32,
    /// Upper bound on how long a staged record waits before the sync loop
    /// looks at it.
    pub flush_interval_ms: u64,
    pub queue_dir: PathBuf,
    pub fetch_max: u32,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            broker_addr: "127.0.0.1:7071".parse().unwrap(),
            cloud_addr: "127.0.0.1:7072".parse().unwrap(),
            topics: vec![DEFAULT_TOPIC.to_string()],
            batch_max: 32,
            flush_interval_ms: 20,
            queue_dir: PathBuf::from("agg-queue"),
            fetch_max: 256,
            backoff_base_ms: 100,
            backoff_max_ms: 5000,
        }
    }
}

/// Outcome of a stop-and-drain. `enqueued = synced + failed + remaining`.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct DrainReport {
    pub enqueued: u64,
    pub synced: u64,
    /// Records the cloud rejected permanently (not retried).
    pub failed: u64,
    pub remaining: u64,
}

#[derive(Debug, Default)]
struct Counters {
    enqueued: AtomicU64,
    synced: AtomicU64,
    failed: AtomicU64,
    retries: AtomicU64,
    invalid: AtomicU64,
    seq_gaps: AtomicU64,
}

/// Live counters of a running aggregator.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct AggStats {
    pub enqueued: u64,
    pub synced: u64,
    pub failed: u64,
    pub retries: u64,
    /// Broker records whose payload could not be parsed (skipped).
    pub invalid: u64,
    /// Records whose seq was not the successor of the user's previous one.
    pub seq_gaps: u64,
}

/// Delay before retry number `attempt` (1-based): base·2^(attempt-1) capped
/// at `max`, with ±20% jitter.
pub fn backoff_delay<R: Rng + ?Sized>(base_ms: u64, max_ms: u64, attempt: u32, rng: &mut R) -> Duration {
    let exp = base_ms.saturating_mul(1u64 << attempt.saturating_sub(1).min(32));
    let nominal = exp.min(max_ms) as f64;
    Duration::from_secs_f64(nominal * rng.random_range(0.8..=1.2) / 1000.0)
}

struct Shared {
    cfg: AggregatorConfig,
    queue: Mutex<SyncQueue>,
    counters: Counters,
    net: Arc<NetCounters>,
    wake: Notify,
    cloud: tokio::sync::Mutex<Option<Arc<CloudConn>>>,
    stop_fetch: watch::Sender<bool>,
    /// Next offset to consume per topic.
    progress: Mutex<HashMap<String, u64>>,
}

impl Shared {
    fn stats(&self) -> AggStats {
        let c = &self.counters;
        AggStats {
            enqueued: c.enqueued.load(Ordering::Relaxed),
            synced: c.synced.load(Ordering::Relaxed),
            failed: c.failed.load(Ordering::Relaxed),
            retries: c.retries.load(Ordering::Relaxed),
            invalid: c.invalid.load(Ordering::Relaxed),
            seq_gaps: c.seq_gaps.load(Ordering::Relaxed),
        }
    }

    async fn cloud(&self) -> io::Result<Arc<CloudConn>> {
        let mut slot = self.cloud.lock().await;
        if let Some(c) = slot.as_ref() {
            if !c.is_closed() {
                return Ok(c.clone());
            }
        }
        let conn = Arc::new(CloudConn::connect(self.cfg.cloud_addr, self.net.clone()).await?);
        *slot = Some(conn.clone());
        Ok(conn)
    }

    async fn drop_cloud(&self, stale: &Arc<CloudConn>) {
        let mut slot = self.cloud.lock().await;
        if slot.as_ref().is_some_and(|c| Arc::ptr_eq(c, stale)) {
            *slot = None;
        }
    }
}

pub struct Aggregator {
    shared: Arc<Shared>,
    tasks: JoinSet<()>,
}

impl Aggregator {
    /// Recovers the local queue and starts consuming and syncing.
    pub async fn start(cfg: AggregatorConfig, net: Arc<NetCounters>) -> io::Result<Aggregator> {
        let queue = SyncQueue::open(&cfg.queue_dir)?;
        let recovered = queue.outstanding() as u64;
        let last = queue.last_offsets();
        let (stop_fetch, _) = watch::channel(false);
        let shared = Arc::new(Shared {
            cfg,
            queue: Mutex::new(queue),
            counters: Counters::default(),
            net,
            wake: Notify::new(),
            cloud: tokio::sync::Mutex::new(None),
            stop_fetch,
            progress: Mutex::new(HashMap::new()),
        });
        shared.counters.enqueued.store(recovered, Ordering::Relaxed);
        let mut tasks = JoinSet::new();
        for topic in shared.cfg.topics.clone() {
            let resume_after = last.iter().find(|(t, _)| *t == topic).map(|(_, o)| *o);
            tasks.spawn(consume(shared.clone(), topic, resume_after));
        }
        tasks.spawn(sync_loop(shared.clone()));
        Ok(Aggregator { shared, tasks })
    }

    pub fn stats(&self) -> AggStats {
        self.shared.stats()
    }

    pub fn outstanding(&self) -> usize {
        self.shared.queue.lock().unwrap().outstanding()
    }

    /// Consumes everything the broker holds right now, stops consuming, then
    /// keeps syncing until the queue is empty or `deadline` passes.
    pub async fn stop_and_drain(mut self, deadline: Duration) -> DrainReport {
        let end = tokio::time::Instant::now() + deadline;
        let targets = self.broker_ends().await;
        while tokio::time::Instant::now() < end {
            let caught_up = {
                let progress = self.shared.progress.lock().unwrap();
                targets
                    .iter()
                    .all(|(t, hwm)| progress.get(t).copied().unwrap_or(0) >= *hwm)
            };
            if caught_up {
                break;
            }
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
        self.shared.stop_fetch.send_replace(true);
        self.shared.wake.notify_one();
        loop {
            if self.outstanding() == 0 || tokio::time::Instant::now() >= end {
                break;
            }
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
        self.tasks.abort_all();
        while self.tasks.join_next().await.is_some() {}
        let _ = self.shared.queue.lock().unwrap().compact();
        let s = self.shared.stats();
        DrainReport {
            enqueued: s.enqueued,
            synced: s.synced,
            failed: s.failed,
            remaining: self.outstanding() as u64,
        }
    }

    /// Current end offset of every consumed topic; topics the broker cannot
    /// be asked about are left out.
    async fn broker_ends(&self) -> Vec<(String, u64)> {
        let Ok(mut client) = BrokerClient::connect(self.shared.cfg.broker_addr, self.shared.net.clone()).await else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for topic in &self.shared.cfg.topics {
            if let Ok(r) = client.fetch(topic, 0, 1, Duration::ZERO).await {
                out.push((topic.clone(), r.next_offset));
            }
        }
        out
    }

    /// Drops everything immediately, as a crash would.
    pub fn abort(mut self) {
        self.tasks.abort_all();
    }
}

async fn consume(shared: Arc<Shared>, topic: String, resume_after: Option<u64>) {
    let mut stop = shared.stop_fetch.subscribe();
    let mut attempt = 0u32;
    let mut last_seq: HashMap<u32, u32> = HashMap::new();
    // everything below this offset is already staged locally
    let mut staged_to = resume_after.map_or(0, |o| o + 1);
    'reconnect: loop {
        if *stop.borrow() {
            return;
        }
        if attempt > 0 {
            let d = backoff_delay(
                shared.cfg.backoff_base_ms,
                shared.cfg.backoff_max_ms,
                attempt,
                &mut rand::rng(),
            );
            tokio::select! {
                _ = tokio::time::sleep(d) => {}
                _ = stop.changed() => return,
            }
        }
        let mut client = match BrokerClient::connect(shared.cfg.broker_addr, shared.net.clone()).await {
            Ok(c) => c,
            Err(e) => {
                tracing::warn!("aggregator: broker connect: {e}");
                attempt += 1;
                continue;
            }
        };
        let committed = match client.committed(GROUP, &topic).await {
            Ok(c) => c,
            Err(e) => {
                tracing::warn!("aggregator: committed offset: {e}");
                attempt += 1;
                continue;
            }
        };
        let mut next = committed.max(staged_to);
        shared.progress.lock().unwrap().insert(topic.clone(), next);
        attempt = 0;
        loop {
            let resp = tokio::select! {
                r = client.fetch(&topic, next, shared.cfg.fetch_max, Duration::from_millis(200)) => r,
                _ = stop.changed() => return,
            };
            let resp = match resp {
                Ok(r) => r,
                Err(e) => {
                    tracing::warn!("aggregator: fetch {topic}@{next}: {e}");
                    attempt += 1;
                    continue 'reconnect;
                }
            };
            if resp.records.is_empty() {
                continue;
            }
            let mut batch = Vec::with_capacity(resp.records.len());
            for r in &resp.records {
                match parse_payload(&r.envelope) {
                    Ok(h) => {
                        if let Some(prev) = last_seq.insert(h.user_id, h.seq) {
                            if h.seq != prev.wrapping_add(1) {
                                shared.counters.seq_gaps.fetch_add(1, Ordering::Relaxed);
                                tracing::warn!("aggregator: user {} seq {} after {}", h.user_id, h.seq, prev);
                            }
                        }
                        batch.push(QueueEntry {
                            topic: topic.clone(),
                            offset: r.offset,
                            envelope: Arc::from(r.envelope.as_slice()),
                        });
                    }
                    Err(e) => {
                        shared.counters.invalid.fetch_add(1, Ordering::Relaxed);
                        tracing::warn!("aggregator: skipping {topic}@{}: {e}", r.offset);
                    }
                }
            }
            let staged = shared.queue.lock().unwrap().append(&batch);
            if let Err(e) = staged {
                tracing::error!("aggregator: queue append failed: {e}");
                attempt += 1;
                continue 'reconnect;
            }
            shared
                .counters
                .enqueued
                .fetch_add(batch.len() as u64, Ordering::Relaxed);
            shared.wake.notify_one();
            next = resp.records.last().map_or(next, |r| r.offset + 1);
            staged_to = next;
            if let Err(e) = client.commit(GROUP, &topic, next).await {
                tracing::warn!("aggregator: commit {topic}@{next}: {e}");
                attempt += 1;
                continue 'reconnect;
            }
            shared.progress.lock().unwrap().insert(topic.clone(), next);
        }
    }
}

async fn sync_loop(shared: Arc<Shared>) {
    let window = shared.cfg.batch_max.max(1) as usize;
    let tick = Duration::from_millis(shared.cfg.flush_interval_ms.max(1));
    let mut inflight: JoinSet<Ticket> = JoinSet::new();
    loop {
        while inflight.len() < window {
            let Some((ticket, entry)) = shared.queue.lock().unwrap().take() else {
                break;
            };
            inflight.spawn(put_until_done(shared.clone(), ticket, entry));
        }
        tokio::select! {
            Some(done) = inflight.join_next(), if !inflight.is_empty() => {
                if let Ok(ticket) = done {
                    let mut q = shared.queue.lock().unwrap();
                    q.mark_done(ticket);
                    if inflight.is_empty() || !q.has_pending() {
                        let _ = q.compact();
                    }
                }
            }
            _ = shared.wake.notified() => {}
            _ = tokio::time::sleep(tick) => {
                let _ = shared.queue.lock().unwrap().compact();
            }
        }
    }
}

/// Writes one record, retrying until the cloud accepts or permanently
/// rejects it.
async fn put_until_done(shared: Arc<Shared>, ticket: Ticket, entry: QueueEntry) -> Ticket {
    let header = parse_payload(&entry.envelope).expect("validated before staging");
    let path = identification_path(header.user_id, header.seq);
    let value: Box<RawValue> = match std::str::from_utf8(&entry.envelope)
        .ok()
        .and_then(|s| RawValue::from_string(s.to_string()).ok())
    {
        Some(v) => v,
        None => {
            shared.counters.failed.fetch_add(1, Ordering::Relaxed);
            return ticket;
        }
    };
    let mut attempt = 0u32;
    loop {
        if attempt > 0 {
            shared.counters.retries.fetch_add(1, Ordering::Relaxed);
            let d = backoff_delay(
                shared.cfg.backoff_base_ms,
                shared.cfg.backoff_max_ms,
                attempt,
                &mut rand::rng(),
            );
            tokio::time::sleep(d).await;
        }
        attempt += 1;
        let conn = match shared.cloud().await {
            Ok(c) => c,
            Err(e) => {
                tracing::debug!("aggregator: cloud connect: {e}");
                continue;
            }
        };
        match conn.put(&path, &value, header.msg_id, Api::Sdk).await {
            Ok(ack) if ack.version.is_some() => {
                shared.counters.synced.fetch_add(1, Ordering::Relaxed);
                return ticket;
            }
            Ok(ack) if ack.error.as_deref() == Some(OVERLOAD) => {}
            Ok(ack) => {
                tracing::error!("aggregator: cloud rejected {path}: {:?}", ack.error);
                shared.counters.failed.fetch_add(1, Ordering::Relaxed);
                return ticket;
            }
            Err(e) => {
                tracing::debug!("aggregator: put {path}: {e}");
                shared.drop_cloud(&conn).await;
            }
        }
    }
}
