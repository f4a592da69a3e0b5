use std::collections::{HashSet, VecDeque};
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;
use tokio::sync::{oneshot, Notify};
use tokio::task::JoinSet;
use tokio::time::Instant;

use super::{schedule, LatencySample, RunConfig, Scenario, SendRecord, SendStatus};
use crate::aggregator::{identification_path, CLOUD_ROOT};
use crate::broker::proto::ProduceReq;
use crate::broker::BrokerClient;
use crate::clock::mono_ns;
use crate::cloudsim::proto::{DbPutAck, EventKind, OVERLOAD};
use crate::cloudsim::{CloudConn, Subscription};
use crate::net::{read_frame, write_frame, NetCounters};
use crate::wire::{build_payload, parse_payload, parse_payload_value, Frame, Kind, MsgId};

/// Receiver-side counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecvStats {
    pub duplicates: u64,
    pub unparseable: u64,
    pub reconnects: u64,
    /// Writes first seen in a resubscription snapshot rather than as a live
    /// event; they produce no sample.
    pub gap_recovered: u64,
}

#[derive(Default)]
struct RecvInner {
    samples: Vec<LatencySample>,
    seen: HashSet<MsgId>,
    stats: RecvStats,
}

struct RecvState {
    scenario: Scenario,
    payload_bytes: usize,
    inner: Mutex<RecvInner>,
    last_recv_ns: AtomicU64,
    progress: Notify,
}

impl RecvState {
    fn on_arrival(&self, recv_ns: u64, bytes: &[u8]) {
        let header = parse_payload(bytes);
        let mut inner = self.inner.lock().unwrap();
        match header {
            Err(_) => inner.stats.unparseable += 1,
            Ok(h) => {
                if !inner.seen.insert(h.msg_id) {
                    inner.stats.duplicates += 1;
                } else {
                    inner.samples.push(LatencySample {
                        msg_id: h.msg_id,
                        user_id: h.user_id,
                        seq: h.seq,
                        sent_ns: h.sent_ns,
                        recv_ns,
                        latency_ns: recv_ns.saturating_sub(h.sent_ns),
                        scenario: self.scenario,
                        payload_bytes: self.payload_bytes,
                    });
                }
            }
        }
        drop(inner);
        self.last_recv_ns.store(recv_ns, Ordering::Relaxed);
        self.progress.notify_waiters();
    }

    fn on_snapshot(&self, value: &serde_json::Value) {
        let mut inner = self.inner.lock().unwrap();
        let Some(users) = value.as_object() else { return };
        for per_user in users.values() {
            let Some(items) = per_user.as_object() else { continue };
            for item in items.values() {
                if let Ok(h) = parse_payload_value(item) {
                    if inner.seen.insert(h.msg_id) {
                        inner.stats.gap_recovered += 1;
                    }
                }
            }
        }
    }
}

/// Everything the tester observed in one run.
#[derive(Debug, Clone)]
pub struct TesterOutput {
    /// Sorted by (user_id, seq).
    pub send_log: Vec<SendRecord>,
    /// Sorted by (user_id, seq).
    pub samples: Vec<LatencySample>,
    pub recv: RecvStats,
    pub start_ns: u64,
}

/// The tester node of one run: one receiver plus `users` senders.
pub struct Tester {
    cfg: RunConfig,
    net: Arc<NetCounters>,
    state: Arc<RecvState>,
    receivers: JoinSet<()>,
    send_log: Vec<SendRecord>,
    start_ns: u64,
}

impl Tester {
    /// Connects the receiver and waits until it is attached.
    pub async fn start(cfg: RunConfig, net: Arc<NetCounters>) -> io::Result<Tester> {
        cfg.validate().map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        let state = Arc::new(RecvState {
            scenario: cfg.scenario,
            payload_bytes: cfg.payload_bytes,
            inner: Mutex::new(RecvInner::default()),
            last_recv_ns: AtomicU64::new(0),
            progress: Notify::new(),
        });
        let mut receivers = JoinSet::new();
        match cfg.scenario {
            Scenario::EdgeOnly => {
                let addr = cfg.broker_addr.expect("validated");
                for topic in cfg.topic_mode.topics(cfg.users) {
                    let client = BrokerClient::connect(addr, net.clone()).await?;
                    receivers.spawn(fetch_loop(state.clone(), client, addr, topic, net.clone()));
                }
            }
            Scenario::CloudOnly | Scenario::EdgeCloud => {
                let addr = cfg.cloud_addr.expect("validated");
                let (ready_tx, ready_rx) = oneshot::channel();
                receivers.spawn(subscribe_loop(state.clone(), addr, net.clone(), ready_tx));
                tokio::time::timeout(Duration::from_secs(30), ready_rx)
                    .await
                    .map_err(|_| io::Error::new(io::ErrorKind::TimedOut, "subscription snapshot timed out"))?
                    .map_err(|_| io::Error::new(io::ErrorKind::ConnectionRefused, "subscription failed"))?;
            }
        }
        Ok(Tester {
            cfg,
            net,
            state,
            receivers,
            send_log: Vec::new(),
            start_ns: 0,
        })
    }

    /// Runs every user to completion (all sends answered or failed) and
    /// returns the send log.
    pub async fn send_all(&mut self) -> &[SendRecord] {
        let t0 = Instant::now() + Duration::from_millis(20);
        self.start_ns = mono_ns() + 20_000_000;
        let mut users = JoinSet::new();
        for user in 0..self.cfg.users {
            users.spawn(run_user(user, self.cfg.clone(), t0, self.net.clone()));
        }
        let mut log = Vec::with_capacity(self.cfg.expected() as usize);
        while let Some(r) = users.join_next().await {
            log.extend(r.expect("user task panicked"));
        }
        log.sort_by_key(|r| (r.user_id, r.seq));
        self.send_log = log;
        &self.send_log
    }

    pub fn sample_count(&self) -> usize {
        self.state.inner.lock().unwrap().samples.len()
    }

    /// Waits until every ok-acknowledged request has been received, or no
    /// new arrival was seen for `grace`.
    pub async fn await_quiescence(&self, grace: Duration) {
        let wanted: HashSet<MsgId> = self
            .send_log
            .iter()
            .filter(|r| r.status == SendStatus::Ok)
            .map(|r| MsgId::derive(self.cfg.seed, r.user_id, r.seq))
            .collect();
        let began = mono_ns();
        loop {
            let notified = self.state.progress.notified();
            {
                let inner = self.state.inner.lock().unwrap();
                if wanted.iter().all(|id| inner.seen.contains(id)) {
                    return;
                }
            }
            let last = self.state.last_recv_ns.load(Ordering::Relaxed).max(began);
            let idle = Duration::from_nanos(mono_ns().saturating_sub(last));
            if idle >= grace {
                return;
            }
            let _ = tokio::time::timeout((grace - idle).min(Duration::from_millis(50)), notified).await;
        }
    }

    pub async fn finish(mut self) -> TesterOutput {
        self.receivers.abort_all();
        while self.receivers.join_next().await.is_some() {}
        let inner = std::mem::take(&mut *self.state.inner.lock().unwrap());
        let mut samples = inner.samples;
        samples.sort_by_key(|s| (s.user_id, s.seq));
        TesterOutput {
            send_log: std::mem::take(&mut self.send_log),
            samples,
            recv: inner.stats,
            start_ns: self.start_ns,
        }
    }
}

async fn fetch_loop(
    state: Arc<RecvState>,
    mut client: BrokerClient,
    addr: SocketAddr,
    topic: String,
    net: Arc<NetCounters>,
) {
    let mut from = 0u64;
    loop {
        match client.fetch(&topic, from, 1024, Duration::from_millis(200)).await {
            Ok(resp) => {
                let recv_ns = mono_ns();
                for r in &resp.records {
                    state.on_arrival(recv_ns, &r.envelope);
                }
                from = resp.records.last().map_or(from, |r| r.offset + 1);
            }
            Err(e) => {
                tracing::warn!("tester: fetch {topic}: {e}");
                state.inner.lock().unwrap().stats.reconnects += 1;
                loop {
                    tokio::time::sleep(Duration::from_millis(100)).await;
                    if let Ok(c) = BrokerClient::connect(addr, net.clone()).await {
                        client = c;
                        break;
                    }
                }
            }
        }
    }
}

async fn subscribe_loop(
    state: Arc<RecvState>,
    addr: SocketAddr,
    net: Arc<NetCounters>,
    ready: oneshot::Sender<()>,
) {
    let mut ready = Some(ready);
    let prefix = format!("{CLOUD_ROOT}/");
    loop {
        let mut sub = match Subscription::open(addr, "tester", &prefix, net.clone()).await {
            Ok(s) => s,
            Err(e) => {
                if ready.is_some() {
                    tracing::error!("tester: subscribe: {e}");
                    return;
                }
                tokio::time::sleep(Duration::from_millis(100)).await;
                continue;
            }
        };
        while let Ok(Some(ev)) = sub.next().await {
            let recv_ns = mono_ns();
            match ev.kind {
                EventKind::Write => state.on_arrival(recv_ns, ev.value.get().as_bytes()),
                EventKind::Snapshot => {
                    if let Some(tx) = ready.take() {
                        let _ = tx.send(());
                    } else if let Ok(v) = serde_json::from_str(ev.value.get()) {
                        state.on_snapshot(&v);
                    }
                }
            }
        }
        state.inner.lock().unwrap().stats.reconnects += 1;
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}

enum Sender {
    Broker(BrokerSender),
    Cloud(CloudSender),
}

async fn run_user(user_id: u32, cfg: RunConfig, t0: Instant, net: Arc<NetCounters>) -> Vec<SendRecord> {
    let offsets = schedule(&cfg, user_id);
    let mut sender = match cfg.scenario {
        Scenario::CloudOnly => Sender::Cloud(CloudSender::connect(cfg.cloud_addr.unwrap(), net, cfg.cloud_api).await),
        Scenario::EdgeOnly | Scenario::EdgeCloud => Sender::Broker(
            BrokerSender::connect(cfg.broker_addr.unwrap(), cfg.topic_mode.topic_for(user_id), net).await,
        ),
    };
    for (seq, off) in offsets.iter().enumerate() {
        let seq = seq as u32;
        tokio::time::sleep_until(t0 + Duration::from_secs_f64(off / 1000.0)).await;
        let sent_ns = mono_ns();
        let msg_id = MsgId::derive(cfg.seed, user_id, seq);
        let env = build_payload(msg_id, user_id, seq, sent_ns, cfg.payload_bytes).expect("validated payload size");
        match &mut sender {
            Sender::Broker(b) => b.send(user_id, seq, sent_ns, env.payload).await,
            Sender::Cloud(c) => c.send(user_id, seq, sent_ns, msg_id, env.payload),
        }
    }
    match sender {
        Sender::Broker(b) => b.finish().await,
        Sender::Cloud(c) => c.finish().await,
    }
}

/// Pipelined producer: frames go out without waiting for acks; the broker
/// answers each connection in order, so acks match a FIFO of pending sends.
struct BrokerSender {
    topic: String,
    wr: Option<OwnedWriteHalf>,
    pending: Arc<Mutex<VecDeque<(u32, u32, u64)>>>,
    reader: Option<tokio::task::JoinHandle<Vec<SendRecord>>>,
    failed: Vec<SendRecord>,
    net: Arc<NetCounters>,
}

impl BrokerSender {
    async fn connect(addr: SocketAddr, topic: String, net: Arc<NetCounters>) -> BrokerSender {
        let pending = Arc::new(Mutex::new(VecDeque::new()));
        let (wr, reader) = match TcpStream::connect(addr).await {
            Ok(stream) => {
                let _ = stream.set_nodelay(true);
                let (rd, wr) = stream.into_split();
                let reader = tokio::spawn(read_produce_acks(rd, pending.clone(), net.clone()));
                (Some(wr), Some(reader))
            }
            Err(e) => {
                tracing::warn!("tester: broker connect: {e}");
                (None, None)
            }
        };
        BrokerSender {
            topic,
            wr,
            pending,
            reader,
            failed: Vec::new(),
            net,
        }
    }

    async fn send(&mut self, user_id: u32, seq: u32, sent_ns: u64, payload: Vec<u8>) {
        let Some(wr) = self.wr.as_mut() else {
            self.failed.push(SendRecord {
                user_id,
                seq,
                sent_ns,
                status: SendStatus::Error,
            });
            return;
        };
        let frame = Frame::json(
            Kind::Produce,
            &ProduceReq {
                topic: self.topic.clone(),
                envelope: payload,
            },
        );
        self.pending.lock().unwrap().push_back((user_id, seq, sent_ns));
        if write_frame(wr, &frame, &self.net).await.is_err() {
            // the ack reader reports everything still pending as failed
            self.wr = None;
        }
    }

    async fn finish(mut self) -> Vec<SendRecord> {
        drop(self.wr.take());
        let mut out = match self.reader.take() {
            Some(h) => h.await.unwrap_or_default(),
            None => Vec::new(),
        };
        out.append(&mut self.failed);
        out
    }
}

async fn read_produce_acks(
    mut rd: OwnedReadHalf,
    pending: Arc<Mutex<VecDeque<(u32, u32, u64)>>>,
    net: Arc<NetCounters>,
) -> Vec<SendRecord> {
    let mut out = Vec::new();
    loop {
        let frame = match read_frame(&mut rd, &net).await {
            Ok(Some(f)) => f,
            _ => break,
        };
        let Some((user_id, seq, sent_ns)) = pending.lock().unwrap().pop_front() else {
            tracing::warn!("tester: ack without a pending produce");
            continue;
        };
        let status = if frame.kind == Kind::ProduceAck {
            SendStatus::Ok
        } else {
            SendStatus::Error
        };
        out.push(SendRecord {
            user_id,
            seq,
            sent_ns,
            status,
        });
    }
    for (user_id, seq, sent_ns) in pending.lock().unwrap().drain(..) {
        out.push(SendRecord {
            user_id,
            seq,
            sent_ns,
            status: SendStatus::Error,
        });
    }
    out
}

struct CloudSender {
    conn: Option<Arc<CloudConn>>,
    api: crate::cloudsim::proto::Api,
    inflight: JoinSet<SendRecord>,
    failed: Vec<SendRecord>,
}

fn ack_status(ack: &DbPutAck) -> SendStatus {
    match (&ack.version, ack.error.as_deref()) {
        (Some(_), _) => SendStatus::Ok,
        (None, Some(OVERLOAD)) => SendStatus::Overload,
        _ => SendStatus::Error,
    }
}

impl CloudSender {
    async fn connect(addr: SocketAddr, net: Arc<NetCounters>, api: crate::cloudsim::proto::Api) -> CloudSender {
        let conn = match CloudConn::connect(addr, net).await {
            Ok(c) => Some(Arc::new(c)),
            Err(e) => {
                tracing::warn!("tester: cloud connect: {e}");
                None
            }
        };
        CloudSender {
            conn,
            api,
            inflight: JoinSet::new(),
            failed: Vec::new(),
        }
    }

    fn send(&mut self, user_id: u32, seq: u32, sent_ns: u64, msg_id: MsgId, payload: Vec<u8>) {
        let record = move |status| SendRecord {
            user_id,
            seq,
            sent_ns,
            status,
        };
        let Some(conn) = self.conn.clone() else {
            self.failed.push(record(SendStatus::Error));
            return;
        };
        let value = RawValue::from_string(String::from_utf8(payload).expect("payloads are ASCII"))
            .expect("payloads are JSON");
        let api = self.api;
        self.inflight.spawn(async move {
            let path = identification_path(user_id, seq);
            let status = match conn.put(&path, &value, msg_id, api).await {
                Ok(ack) => ack_status(&ack),
                Err(_) => SendStatus::Error,
            };
            record(status)
        });
    }

    async fn finish(mut self) -> Vec<SendRecord> {
        let mut out = std::mem::take(&mut self.failed);
        while let Some(r) = self.inflight.join_next().await {
            out.push(r.expect("put task panicked"));
        }
        out
    }
}
