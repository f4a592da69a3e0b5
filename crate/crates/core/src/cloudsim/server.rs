use std::collections::HashMap;
use std::io;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::value::RawValue;
use tokio::io::AsyncWriteExt;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch};
use tokio::task::JoinSet;
use tokio::time::Instant;

use super::model::{stream_rng, CloudModel, SaturationModel, Stream};
use super::proto::{Api, DbEvent, DbPut, DbPutAck, DbSubscribe, EventKind, OVERLOAD};
use super::tree::{normalize_prefix, segments, under_prefix, JsonTree, PathError};
use crate::net::{read_frame, write_frame, NetCounters};
use crate::wire::{ErrorBody, Frame, Kind, MsgId};

/// One line of the emulator's outcome journal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JournalEntry {
    Accepted { msg_id: MsgId, version: u64 },
    Overload { msg_id: MsgId },
}

type EventTx = mpsc::UnboundedSender<(Instant, Arc<Frame>)>;

struct Sub {
    client: String,
    prefix: String,
    tx: EventTx,
    last: Instant,
}

struct Core {
    tree: JsonTree,
    applied: HashMap<MsgId, u64>,
    subs: Vec<Sub>,
    sat: SaturationModel,
    journal: Vec<JournalEntry>,
}

/// Emulator state. It outlives any [`CloudServer`] bound to it, so a server
/// can be torn down and restarted (an outage) without losing data.
pub struct CloudState {
    model: CloudModel,
    epoch: Instant,
    core: Mutex<Core>,
}

fn str_key(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn ms(d: f64) -> Duration {
    Duration::from_secs_f64(d.max(0.0) / 1000.0)
}

impl CloudState {
    pub fn new(model: CloudModel) -> Arc<CloudState> {
        let sat = SaturationModel::new(model.workers, model.queue_capacity);
        Arc::new(CloudState {
            model,
            epoch: Instant::now(),
            core: Mutex::new(Core {
                tree: JsonTree::new(),
                applied: HashMap::new(),
                subs: Vec::new(),
                sat,
                journal: Vec::new(),
            }),
        })
    }

    pub fn model(&self) -> &CloudModel {
        &self.model
    }

    fn now_ns(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64
    }

    pub fn version(&self) -> u64 {
        self.core.lock().unwrap().tree.version()
    }

    pub fn get(&self, path: &str) -> Option<serde_json::Value> {
        self.core.lock().unwrap().tree.get(path)
    }

    pub fn count_under(&self, prefix: &str) -> usize {
        self.core.lock().unwrap().tree.count_under(prefix)
    }

    /// msg_ids applied since the last reset, with their versions.
    pub fn applied(&self) -> HashMap<MsgId, u64> {
        self.core.lock().unwrap().applied.clone()
    }

    pub fn journal(&self) -> Vec<JournalEntry> {
        self.core.lock().unwrap().journal.clone()
    }

    pub fn subscriber_count(&self) -> usize {
        self.core.lock().unwrap().subs.len()
    }

    pub fn write_journal(&self, path: &Path) -> io::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["outcome", "msg_id", "version"])?;
        for e in self.journal() {
            match e {
                JournalEntry::Accepted { msg_id, version } => {
                    w.write_record(["accepted", &msg_id.to_hex(), &version.to_string()])?
                }
                JournalEntry::Overload { msg_id } => w.write_record(["overload", &msg_id.to_hex(), ""])?,
            }
        }
        w.flush()
    }

    /// Deletes the database, drops every subscription and idles the worker
    /// pool. The version counter is preserved. Returns the current version.
    pub fn reset(&self) -> u64 {
        let mut core = self.core.lock().unwrap();
        core.tree.clear();
        core.applied.clear();
        core.subs.clear();
        core.journal.clear();
        core.sat = SaturationModel::new(self.model.workers, self.model.queue_capacity);
        core.tree.version()
    }

    /// Applies an admitted write. Duplicate msg_ids return the original
    /// version and notify nobody.
    fn apply(&self, path: &str, value: &RawValue, msg_id: MsgId) -> Result<u64, PathError> {
        let mut core = self.core.lock().unwrap();
        if let Some(&v) = core.applied.get(&msg_id) {
            return Ok(v);
        }
        let raw: Arc<RawValue> = Arc::from(value.to_owned());
        let version = core.tree.put(path, raw)?;
        core.applied.insert(msg_id, version);
        core.journal.push(JournalEntry::Accepted { msg_id, version });
        let frame = Arc::new(Frame::json(
            Kind::DbEvent,
            &DbEvent {
                kind: EventKind::Write,
                path: path.to_string(),
                value: value.to_owned(),
                version,
                origin_msg_id: Some(msg_id),
            },
        ));
        let now = Instant::now();
        let wan = self.model.wan();
        let seed = self.model.rng_seed;
        let key = msg_id.fold();
        core.subs.retain_mut(|s| {
            if !under_prefix(path, &s.prefix) {
                return true;
            }
            let delay = wan.sample(&mut stream_rng(seed, key ^ str_key(&s.client), Stream::Notify));
            let at = (now + ms(delay)).max(s.last);
            s.last = at;
            s.tx.send((at, frame.clone())).is_ok()
        });
        Ok(version)
    }

    fn subscribe(
        &self,
        client: &str,
        prefix: &str,
    ) -> Result<mpsc::UnboundedReceiver<(Instant, Arc<Frame>)>, PathError> {
        let prefix = normalize_prefix(prefix)?;
        let mut core = self.core.lock().unwrap();
        let version = core.tree.version();
        let snapshot = core.tree.subtree(&prefix);
        let delay = self.model.wan().sample(&mut stream_rng(
            self.model.rng_seed,
            str_key(client) ^ version,
            Stream::Snapshot,
        ));
        let at = Instant::now() + ms(delay);
        let (tx, rx) = mpsc::unbounded_channel();
        let frame = Frame::json(
            Kind::DbEvent,
            &DbEvent {
                kind: EventKind::Snapshot,
                path: prefix.clone(),
                value: RawValue::from_string(snapshot.to_string()).expect("valid json"),
                version,
                origin_msg_id: None,
            },
        );
        let _ = tx.send((at, Arc::new(frame)));
        core.subs.push(Sub {
            client: client.to_string(),
            prefix,
            tx,
            last: at,
        });
        Ok(rx)
    }

    /// Full put pipeline: WAN (+ REST front end) → admission queue → worker
    /// service → commit and fan-out → WAN back to the writer.
    async fn process_put(self: Arc<Self>, req: DbPut) -> DbPutAck {
        let msg_id = req.msg_id;
        if let Err(e) = segments(&req.path) {
            return DbPutAck {
                version: None,
                error: Some(format!("protocol: {e}")),
                msg_id: Some(msg_id),
            };
        }
        if !req.value.get().trim_start().starts_with('{') {
            return DbPutAck {
                version: None,
                error: Some(format!("protocol: {}", PathError::NotObject(req.path.clone()))),
                msg_id: Some(msg_id),
            };
        }
        let seed = self.model.rng_seed;
        let key = msg_id.fold();
        let wan = self.model.wan();
        let mut inbound = wan.sample(&mut stream_rng(seed, key, Stream::Request));
        if req.api == Api::Rest {
            inbound += self.model.rest_overhead_ms;
        }
        tokio::time::sleep(ms(inbound)).await;

        let service = self.model.service_ns(req.value.get().len());
        let slot = {
            let mut core = self.core.lock().unwrap();
            let slot = core.sat.admit(self.now_ns(), service);
            if slot.is_err() {
                core.journal.push(JournalEntry::Overload { msg_id });
            }
            slot
        };
        let outbound = ms(wan.sample(&mut stream_rng(seed, key, Stream::Ack)));
        let ack = match slot {
            Err(_) => DbPutAck {
                version: None,
                error: Some(OVERLOAD.to_string()),
                msg_id: Some(msg_id),
            },
            Ok(slot) => {
                tokio::time::sleep_until(self.epoch + Duration::from_nanos(slot.finish_ns)).await;
                match self.apply(&req.path, &req.value, msg_id) {
                    Ok(version) => DbPutAck {
                        version: Some(version),
                        error: None,
                        msg_id: Some(msg_id),
                    },
                    Err(e) => DbPutAck {
                        version: None,
                        error: Some(format!("protocol: {e}")),
                        msg_id: Some(msg_id),
                    },
                }
            }
        };
        tokio::time::sleep(outbound).await;
        ack
    }
}

/// TCP front end of a [`CloudState`].
pub struct CloudServer {
    addr: SocketAddr,
    accept: tokio::task::JoinHandle<()>,
}

impl CloudServer {
    pub async fn bind(
        state: Arc<CloudState>,
        addr: SocketAddr,
        counters: Arc<NetCounters>,
    ) -> io::Result<CloudServer> {
        let listener = TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let accept = tokio::spawn(async move {
            let mut conns = JoinSet::new();
            loop {
                tokio::select! {
                    accepted = listener.accept() => match accepted {
                        Ok((stream, _)) => {
                            let _ = stream.set_nodelay(true);
                            conns.spawn(serve_conn(state.clone(), stream, counters.clone()));
                        }
                        Err(e) => tracing::warn!("cloud accept: {e}"),
                    },
                    Some(_) = conns.join_next(), if !conns.is_empty() => {}
                }
            }
        });
        Ok(CloudServer { addr, accept })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Closes the listener and every connection, abandoning in-flight puts.
    pub fn shutdown(self) {
        self.accept.abort();
    }
}

impl Drop for CloudServer {
    fn drop(&mut self) {
        self.accept.abort();
    }
}

async fn serve_conn(state: Arc<CloudState>, stream: TcpStream, counters: Arc<NetCounters>) {
    let (mut rd, mut wr) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel::<Arc<Frame>>();
    let (close_tx, mut close_rx) = watch::channel(false);
    let mut tasks = JoinSet::new();
    {
        let counters = counters.clone();
        let mut close_rx = close_rx.clone();
        tasks.spawn(async move {
            loop {
                tokio::select! {
                    f = rx.recv() => match f {
                        Some(f) => if write_frame(&mut wr, &f, &counters).await.is_err() { break },
                        None => break,
                    },
                    _ = close_rx.changed() => break,
                }
            }
            let _ = wr.shutdown().await;
        });
    }
    loop {
        let frame = tokio::select! {
            r = read_frame(&mut rd, &counters) => match r {
                Ok(Some(f)) => f,
                Ok(None) => break,
                Err(e) => {
                    let _ = tx.send(Arc::new(ErrorBody::frame("protocol", e.to_string())));
                    break;
                }
            },
            _ = close_rx.changed() => break,
            Some(_) = tasks.join_next(), if !tasks.is_empty() => continue,
        };
        match frame.kind {
            Kind::DbPut => match frame.parse::<DbPut>() {
                Ok(req) => {
                    let state = state.clone();
                    let tx = tx.clone();
                    tasks.spawn(async move {
                        let ack = state.process_put(req).await;
                        let _ = tx.send(Arc::new(Frame::json(Kind::DbPutAck, &ack)));
                    });
                }
                Err(e) => {
                    let _ = tx.send(Arc::new(ErrorBody::frame("protocol", e.to_string())));
                }
            },
            Kind::DbSubscribe => {
                let sub = frame
                    .parse::<DbSubscribe>()
                    .map_err(|e| e.to_string())
                    .and_then(|s| state.subscribe(&s.client, &s.prefix).map_err(|e| e.to_string()));
                match sub {
                    Ok(mut events) => {
                        let tx = tx.clone();
                        let close_tx = close_tx.clone();
                        tasks.spawn(async move {
                            while let Some((at, f)) = events.recv().await {
                                tokio::time::sleep_until(at).await;
                                if tx.send(f).is_err() {
                                    break;
                                }
                            }
                            // subscription dropped (reset): end the stream
                            let _ = close_tx.send(true);
                        });
                    }
                    Err(e) => {
                        let _ = tx.send(Arc::new(ErrorBody::frame("protocol", e)));
                    }
                }
            }
            Kind::DbReset => {
                let version = state.reset();
                let ack = DbPutAck {
                    version: Some(version),
                    error: None,
                    msg_id: None,
                };
                let _ = tx.send(Arc::new(Frame::json(Kind::DbPutAck, &ack)));
            }
            other => {
                let _ = tx.send(Arc::new(ErrorBody::frame(
                    "protocol",
                    format!("unexpected frame {other:?} at cloud"),
                )));
            }
        }
    }
    // let queued replies drain before the writer is torn down
    drop(tx);
    let _ = tokio::time::timeout(Duration::from_millis(100), async {
        while tasks.join_next().await.is_some() {}
    })
    .await;
}
