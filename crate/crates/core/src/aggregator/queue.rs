//! Durable local sync queue.
//!
//! `queue.log` holds one frame per enqueued record; `acked.json` holds the
//! length of the fully synchronized prefix. Once every record is synced the
//! log is truncated and the prefix reset to zero.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::net::tmp_path;
use crate::wire::{self, b64, Kind, WireError};

const LOG: &str = "queue.log";
const ACKED: &str = "acked.json";

#[derive(Serialize, Deserialize)]
struct DiskRecord {
    topic: String,
    offset: u64,
    #[serde(with = "b64")]
    envelope: Vec<u8>,
}

#[derive(Serialize, Deserialize, Default)]
struct AckedFile {
    prefix: u64,
}

/// One record waiting to be written to the cloud.
#[derive(Debug, Clone)]
pub struct QueueEntry {
    pub topic: String,
    pub offset: u64,
    pub envelope: Arc<[u8]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Pending,
    InFlight,
    Done,
}

/// Ticket for a record handed out by [`SyncQueue::take`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ticket(u64);

pub struct SyncQueue {
    dir: PathBuf,
    log: File,
    entries: Vec<(QueueEntry, State)>,
    /// Entries before this index are done and no longer tracked.
    base: u64,
    /// Lowest index that might still be pending.
    cursor: usize,
    persisted_prefix: u64,
}

impl SyncQueue {
    /// Opens (or recovers) the queue in `dir`. Records past the persisted
    /// acked prefix come back as pending.
    pub fn open(dir: &Path) -> io::Result<SyncQueue> {
        fs::create_dir_all(dir)?;
        let log_path = dir.join(LOG);
        let bytes = match fs::read(&log_path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e),
        };
        let mut records = Vec::new();
        let mut rest = &bytes[..];
        let mut valid = 0usize;
        while !rest.is_empty() {
            match wire::decode_frame(rest) {
                Ok((frame, tail)) => {
                    let rec: DiskRecord = frame
                        .parse()
                        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
                    records.push(QueueEntry {
                        topic: rec.topic,
                        offset: rec.offset,
                        envelope: rec.envelope.into(),
                    });
                    valid = bytes.len() - tail.len();
                    rest = tail;
                }
                Err(WireError::Incomplete { .. }) => break,
                Err(e) => return Err(io::Error::new(io::ErrorKind::InvalidData, e)),
            }
        }
        if valid < bytes.len() {
            tracing::warn!("sync queue: truncating {} torn bytes", bytes.len() - valid);
            let f = OpenOptions::new().write(true).open(&log_path)?;
            f.set_len(valid as u64)?;
        }
        let acked: AckedFile = match fs::read(dir.join(ACKED)) {
            Ok(b) => serde_json::from_slice(&b).unwrap_or_default(),
            Err(_) => AckedFile::default(),
        };
        let prefix = (acked.prefix as usize).min(records.len());
        let entries = records
            .into_iter()
            .enumerate()
            .map(|(i, e)| (e, if i < prefix { State::Done } else { State::Pending }))
            .collect();
        let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        let mut q = SyncQueue {
            dir: dir.to_path_buf(),
            log,
            entries,
            base: 0,
            cursor: prefix,
            persisted_prefix: acked.prefix,
        };
        q.compact()?;
        Ok(q)
    }

    /// Appends records and flushes them to the file before returning.
    pub fn append(&mut self, batch: &[QueueEntry]) -> io::Result<()> {
        if batch.is_empty() {
            return Ok(());
        }
        let mut buf = Vec::new();
        for e in batch {
            let body = serde_json::to_vec(&DiskRecord {
                topic: e.topic.clone(),
                offset: e.offset,
                envelope: e.envelope.to_vec(),
            })?;
            wire::encode_frame_into(&mut buf, Kind::Produce, &body)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        }
        self.log.write_all(&buf)?;
        self.log.flush()?;
        self.entries
            .extend(batch.iter().cloned().map(|e| (e, State::Pending)));
        Ok(())
    }

    /// Hands out the oldest pending record.
    pub fn take(&mut self) -> Option<(Ticket, QueueEntry)> {
        while self.cursor < self.entries.len() && self.entries[self.cursor].1 != State::Pending {
            self.cursor += 1;
        }
        let (entry, state) = self.entries.get_mut(self.cursor)?;
        *state = State::InFlight;
        let ticket = Ticket(self.base + self.cursor as u64);
        self.cursor += 1;
        Some((ticket, entry.clone()))
    }

    pub fn mark_done(&mut self, ticket: Ticket) {
        if let Some(i) = ticket.0.checked_sub(self.base) {
            if let Some(slot) = self.entries.get_mut(i as usize) {
                slot.1 = State::Done;
            }
        }
    }

    /// Records in the queue that are not yet done (pending or in flight).
    pub fn outstanding(&self) -> usize {
        self.entries.iter().filter(|(_, s)| *s != State::Done).count()
    }

    pub fn has_pending(&self) -> bool {
        self.entries[self.cursor.min(self.entries.len())..]
            .iter()
            .any(|(_, s)| *s == State::Pending)
    }

    /// Highest offset enqueued per topic, for every record still on disk.
    pub fn last_offsets(&self) -> Vec<(String, u64)> {
        let mut out: Vec<(String, u64)> = Vec::new();
        for (e, _) in &self.entries {
            match out.iter_mut().find(|(t, _)| *t == e.topic) {
                Some((_, o)) => *o = (*o).max(e.offset),
                None => out.push((e.topic.clone(), e.offset)),
            }
        }
        out
    }

    /// Persists the done prefix, truncating the log when everything is done.
    pub fn compact(&mut self) -> io::Result<()> {
        let prefix = self.entries.iter().take_while(|(_, s)| *s == State::Done).count();
        if prefix == self.entries.len() && prefix > 0 {
            self.log.set_len(0)?;
            self.base += prefix as u64;
            self.entries.clear();
            self.cursor = 0;
            self.write_acked(0)?;
        } else if prefix as u64 != self.persisted_prefix {
            self.write_acked(prefix as u64)?;
        }
        Ok(())
    }

    fn write_acked(&mut self, prefix: u64) -> io::Result<()> {
        let path = self.dir.join(ACKED);
        let tmp = tmp_path(&path);
        fs::write(&tmp, serde_json::to_vec(&AckedFile { prefix })?)?;
        fs::rename(tmp, path)?;
        self.persisted_prefix = prefix;
        Ok(())
    }
}
