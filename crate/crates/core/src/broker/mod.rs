//! Single-node publish-subscribe commit log.
//!
//! Each topic is a single append-only log file made of PRODUCE frames whose
//! body carries `{offset, stored_ns, envelope}`. The in-memory index is
//! rebuilt by scanning the files on startup; a torn tail frame (crash during
//! a write) is truncated away. Consumer-group offsets live in `offsets.json`
//! and are rewritten atomically on every commit.

mod client;
pub mod proto;
mod server;

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::watch;

use crate::clock::mono_ns;
use crate::wire::{self, Kind, WireError};

pub use client::BrokerClient;
pub use server::BrokerServer;

const OFFSETS_FILE: &str = "offsets.json";
const LOG_SUFFIX: &str = ".log";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BrokerConfig {
    /// TCP port; 0 picks an ephemeral port.
    pub port: u16,
    pub data_dir: PathBuf,
    /// Flush the log writer after every N appends. 1 = flush before every ack.
    pub flush_every: u32,
    /// Also `fsync` the log file on each flush.
    pub fsync: bool,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            port: 7071,
            data_dir: PathBuf::from("broker-data"),
            flush_every: 1,
            fsync: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("storage: {0}")]
    Storage(#[from] io::Error),
    #[error("protocol: {0}")]
    Protocol(#[from] WireError),
    #[error("offset {requested} out of range for topic {topic:?} (next offset {next})")]
    OutOfRange {
        topic: String,
        requested: u64,
        next: u64,
    },
    #[error("corrupt log {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
}

impl BrokerError {
    pub fn code(&self) -> &'static str {
        match self {
            BrokerError::Storage(_) | BrokerError::Corrupt { .. } => "storage",
            BrokerError::Protocol(_) => "protocol",
            BrokerError::OutOfRange { .. } => "out_of_range",
        }
    }
}

/// One stored record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub offset: u64,
    pub stored_ns: u64,
    pub envelope: Arc<[u8]>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchResult {
    pub records: Vec<Record>,
    pub topic_unknown: bool,
    pub next_offset: u64,
}

struct LogWriter {
    file: BufWriter<File>,
    unflushed: u32,
}

struct Topic {
    writer: Mutex<LogWriter>,
    records: RwLock<Vec<Record>>,
    hwm: watch::Sender<u64>,
}

impl Topic {
    fn next_offset(&self) -> u64 {
        self.records.read().unwrap().len() as u64
    }
}

/// Broker state shared by all connections.
pub struct Broker {
    cfg: BrokerConfig,
    topics: RwLock<HashMap<String, Arc<Topic>>>,
    cursors: Mutex<HashMap<String, HashMap<String, u64>>>,
    /// Bumped whenever a topic is created, so fetchers of unknown topics can
    /// long-poll for its creation.
    created: watch::Sender<u64>,
}

fn topic_file_name(topic: &str) -> String {
    let mut s = String::with_capacity(topic.len() * 2 + LOG_SUFFIX.len());
    for b in topic.bytes() {
        s.push_str(&format!("{b:02x}"));
    }
    s.push_str(LOG_SUFFIX);
    s
}

fn topic_from_file_name(name: &str) -> Option<String> {
    let hex = name.strip_suffix(LOG_SUFFIX)?;
    if hex.len() % 2 != 0 {
        return None;
    }
    let bytes: Option<Vec<u8>> = (0..hex.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&hex[i..i + 2], 16).ok())
        .collect();
    String::from_utf8(bytes?).ok()
}

/// Scans one log file, truncating an incomplete tail frame.
fn recover_log(path: &Path) -> Result<Vec<Record>, BrokerError> {
    let bytes = fs::read(path)?;
    let mut records = Vec::new();
    let mut rest: &[u8] = &bytes;
    let corrupt = |detail: String| BrokerError::Corrupt {
        path: path.to_path_buf(),
        detail,
    };
    loop {
        if rest.is_empty() {
            break;
        }
        match wire::decode_frame(rest) {
            Ok((frame, tail)) => {
                let stored: proto::StoredRecord = frame.parse().map_err(|e| corrupt(e.to_string()))?;
                if stored.offset != records.len() as u64 {
                    return Err(corrupt(format!(
                        "expected offset {}, found {}",
                        records.len(),
                        stored.offset
                    )));
                }
                records.push(Record {
                    offset: stored.offset,
                    stored_ns: stored.stored_ns,
                    envelope: stored.envelope.into(),
                });
                rest = tail;
            }
            Err(WireError::Incomplete { .. }) => {
                let valid = bytes.len() - rest.len();
                tracing::warn!(
                    "truncating torn tail of {} at byte {valid}",
                    path.display()
                );
                OpenOptions::new().write(true).open(path)?.set_len(valid as u64)?;
                break;
            }
            Err(e) => return Err(corrupt(e.to_string())),
        }
    }
    Ok(records)
}

impl Broker {
    /// Opens (or creates) the broker data directory and rebuilds the index.
    pub fn open(cfg: BrokerConfig) -> Result<Broker, BrokerError> {
        fs::create_dir_all(&cfg.data_dir)?;
        let mut topics = HashMap::new();
        for entry in fs::read_dir(&cfg.data_dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some(topic) = topic_from_file_name(&name) else {
                continue;
            };
            let path = entry.path();
            let records = recover_log(&path)?;
            let next = records.len() as u64;
            let file = OpenOptions::new().append(true).open(&path)?;
            topics.insert(
                topic,
                Arc::new(Topic {
                    writer: Mutex::new(LogWriter {
                        file: BufWriter::new(file),
                        unflushed: 0,
                    }),
                    records: RwLock::new(records),
                    hwm: watch::Sender::new(next),
                }),
            );
        }
        let cursors = match fs::read(cfg.data_dir.join(OFFSETS_FILE)) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| BrokerError::Corrupt {
                path: cfg.data_dir.join(OFFSETS_FILE),
                detail: e.to_string(),
            })?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => HashMap::new(),
            Err(e) => return Err(e.into()),
        };
        Ok(Broker {
            cfg,
            topics: RwLock::new(topics),
            cursors: Mutex::new(cursors),
            created: watch::Sender::new(0),
        })
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.cfg
    }

    fn topic(&self, name: &str) -> Option<Arc<Topic>> {
        self.topics.read().unwrap().get(name).cloned()
    }

    fn topic_or_create(&self, name: &str) -> Result<Arc<Topic>, BrokerError> {
        if let Some(t) = self.topic(name) {
            return Ok(t);
        }
        let mut topics = self.topics.write().unwrap();
        if let Some(t) = topics.get(name) {
            return Ok(t.clone());
        }
        let path = self.cfg.data_dir.join(topic_file_name(name));
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let t = Arc::new(Topic {
            writer: Mutex::new(LogWriter {
                file: BufWriter::new(file),
                unflushed: 0,
            }),
            records: RwLock::new(Vec::new()),
            hwm: watch::Sender::new(0),
        });
        topics.insert(name.to_string(), t.clone());
        drop(topics);
        self.created.send_modify(|g| *g += 1);
        Ok(t)
    }

    /// Appends an envelope and returns its offset. The record is written to
    /// the log (and flushed, per `flush_every`) before this returns.
    pub fn produce(&self, topic: &str, envelope: &[u8]) -> Result<u64, BrokerError> {
        wire::validate_topic(topic)?;
        wire::parse_payload(envelope)?;
        let t = self.topic_or_create(topic)?;
        let mut w = t.writer.lock().unwrap();
        let offset = t.next_offset();
        let stored_ns = mono_ns();
        let body = serde_json::to_vec(&proto::StoredRecord {
            offset,
            stored_ns,
            envelope: envelope.to_vec(),
        })
        .expect("record serializes");
        let bytes = wire::encode_frame(Kind::Produce, &body)?;
        w.file.write_all(&bytes)?;
        w.unflushed += 1;
        if w.unflushed >= self.cfg.flush_every.max(1) {
            w.file.flush()?;
            if self.cfg.fsync {
                w.file.get_ref().sync_data()?;
            }
            w.unflushed = 0;
        }
        t.records.write().unwrap().push(Record {
            offset,
            stored_ns,
            envelope: envelope.into(),
        });
        t.hwm.send_replace(offset + 1);
        Ok(offset)
    }

    pub fn next_offset(&self, topic: &str) -> u64 {
        self.topic(topic).map_or(0, |t| t.next_offset())
    }

    /// Returns records `[from, from + k)` with `k <= max`. When nothing is
    /// available, waits up to `wait` for new records (or for the topic to be
    /// created) and then returns an empty result.
    pub async fn fetch(
        &self,
        topic: &str,
        from: u64,
        max: u32,
        wait: Duration,
    ) -> Result<FetchResult, BrokerError> {
        let deadline = tokio::time::Instant::now() + wait;
        let max = max.max(1) as u64;
        loop {
            match self.topic(topic) {
                Some(t) => {
                    let mut hwm_rx = t.hwm.subscribe();
                    {
                        let records = t.records.read().unwrap();
                        let next = records.len() as u64;
                        if from > next {
                            return Err(BrokerError::OutOfRange {
                                topic: topic.to_string(),
                                requested: from,
                                next,
                            });
                        }
                        if from < next {
                            let end = next.min(from + max);
                            return Ok(FetchResult {
                                records: records[from as usize..end as usize].to_vec(),
                                topic_unknown: false,
                                next_offset: next,
                            });
                        }
                    }
                    if tokio::time::timeout_at(deadline, hwm_rx.changed())
                        .await
                        .is_err()
                    {
                        return Ok(FetchResult {
                            records: Vec::new(),
                            topic_unknown: false,
                            next_offset: t.next_offset(),
                        });
                    }
                    // a reset drops the topic; re-resolve on the next pass
                }
                None => {
                    let mut created = self.created.subscribe();
                    if self.topic(topic).is_some() {
                        continue;
                    }
                    if from > 0 {
                        return Err(BrokerError::OutOfRange {
                            topic: topic.to_string(),
                            requested: from,
                            next: 0,
                        });
                    }
                    if tokio::time::timeout_at(deadline, created.changed())
                        .await
                        .is_err()
                    {
                        return Ok(FetchResult {
                            records: Vec::new(),
                            topic_unknown: true,
                            next_offset: 0,
                        });
                    }
                }
            }
        }
    }

    /// Stores `offset` for `(group, topic)`. Commits never move backwards;
    /// a stale commit leaves the stored value unchanged. Returns the stored
    /// value.
    pub fn commit_offset(&self, group: &str, topic: &str, offset: u64) -> Result<u64, BrokerError> {
        let next = self.next_offset(topic);
        if offset > next {
            return Err(BrokerError::OutOfRange {
                topic: topic.to_string(),
                requested: offset,
                next,
            });
        }
        let mut cursors = self.cursors.lock().unwrap();
        let slot = cursors
            .entry(group.to_string())
            .or_default()
            .entry(topic.to_string())
            .or_insert(0);
        if offset <= *slot {
            return Ok(*slot);
        }
        *slot = offset;
        self.persist_cursors(&cursors)?;
        Ok(offset)
    }

    pub fn committed(&self, group: &str, topic: &str) -> u64 {
        self.cursors
            .lock()
            .unwrap()
            .get(group)
            .and_then(|m| m.get(topic))
            .copied()
            .unwrap_or(0)
    }

    fn persist_cursors(&self, cursors: &HashMap<String, HashMap<String, u64>>) -> io::Result<()> {
        let path = self.cfg.data_dir.join(OFFSETS_FILE);
        let tmp = crate::net::tmp_path(&path);
        let mut f = File::create(&tmp)?;
        f.write_all(&serde_json::to_vec(cursors)?)?;
        if self.cfg.fsync {
            f.sync_data()?;
        }
        fs::rename(tmp, path)
    }

    /// Deletes every topic, log file and cursor.
    pub fn reset(&self) -> Result<(), BrokerError> {
        let mut topics = self.topics.write().unwrap();
        let mut cursors = self.cursors.lock().unwrap();
        topics.clear();
        cursors.clear();
        for entry in fs::read_dir(&self.cfg.data_dir)? {
            let path = entry?.path();
            if path.is_dir() {
                fs::remove_dir_all(path)?;
            } else {
                fs::remove_file(path)?;
            }
        }
        drop(cursors);
        drop(topics);
        self.created.send_modify(|g| *g += 1);
        Ok(())
    }

    /// Flushes all topic writers.
    pub fn flush(&self) -> io::Result<()> {
        for t in self.topics.read().unwrap().values() {
            t.writer.lock().unwrap().file.flush()?;
        }
        Ok(())
    }

    pub fn topic_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.topics.read().unwrap().keys().cloned().collect();
        v.sort();
        v
    }

    /// Total bytes of envelopes held in memory; used for memory accounting in tests.
    pub fn stored_bytes(&self) -> usize {
        self.topics
            .read()
            .unwrap()
            .values()
            .map(|t| t.records.read().unwrap().iter().map(|r| r.envelope.len()).sum::<usize>())
            .sum()
    }
}

/// Scans a topic log file directly (independent of any running broker).
pub fn scan_log_file(data_dir: &Path, topic: &str) -> Result<Vec<Record>, BrokerError> {
    let path = data_dir.join(topic_file_name(topic));
    if !path.exists() {
        return Ok(Vec::new());
    }
    recover_log(&path)
}
