//! Framed async transport with application-level byte counters.

use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use crate::wire::{self, Frame, Kind, WireError};

/// Cumulative bytes moved by one component's transport layer.
#[derive(Debug, Default)]
pub struct NetCounters {
    rx: AtomicU64,
    tx: AtomicU64,
}

impl NetCounters {
    pub fn new() -> Arc<NetCounters> {
        Arc::new(NetCounters::default())
    }

    pub fn add_in(&self, n: usize) {
        self.rx.fetch_add(n as u64, Ordering::Relaxed);
    }

    pub fn add_out(&self, n: usize) {
        self.tx.fetch_add(n as u64, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> NetSnapshot {
        NetSnapshot {
            net_in: self.rx.load(Ordering::Relaxed),
            net_out: self.tx.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSnapshot {
    pub net_in: u64,
    pub net_out: u64,
}

fn invalid(e: WireError) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, e)
}

/// Reads one frame. Returns `Ok(None)` on a clean end of stream before the
/// first length byte.
pub async fn read_frame<R: AsyncRead + Unpin>(
    r: &mut R,
    counters: &NetCounters,
) -> io::Result<Option<Frame>> {
    let mut len_buf = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = r.read(&mut len_buf[got..]).await?;
        if n == 0 {
            if got == 0 {
                return Ok(None);
            }
            return Err(io::ErrorKind::UnexpectedEof.into());
        }
        got += n;
    }
    let len = u32::from_be_bytes(len_buf) as usize;
    if len == 0 {
        return Err(invalid(WireError::EmptyFrame));
    }
    if len - 1 > wire::MAX_BODY {
        return Err(invalid(WireError::Oversized(len - 1)));
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind).await?;
    let kind = Kind::try_from(kind[0]).map_err(invalid)?;
    let mut body = vec![0u8; len - 1];
    r.read_exact(&mut body).await?;
    counters.add_in(4 + len);
    Ok(Some(Frame { kind, body }))
}

pub async fn write_frame<W: AsyncWrite + Unpin>(
    w: &mut W,
    frame: &Frame,
    counters: &NetCounters,
) -> io::Result<()> {
    let bytes = wire::encode_frame(frame.kind, &frame.body).map_err(invalid)?;
    w.write_all(&bytes).await?;
    counters.add_out(bytes.len());
    Ok(())
}

/// Contents of a component's stats file, read by the resource sampler.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct StatsFile {
    pub pid: u32,
    pub net_in: u64,
    pub net_out: u64,
}

impl StatsFile {
    pub fn read(path: &Path) -> io::Result<StatsFile> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    pub fn write_atomic(&self, path: &Path) -> io::Result<()> {
        let tmp = tmp_path(path);
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(tmp, path)
    }
}

pub(crate) fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Periodically publishes `counters` to `path` until the task is dropped.
pub fn spawn_stats_writer(
    path: PathBuf,
    counters: Arc<NetCounters>,
    every: Duration,
) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let pid = std::process::id();
        let mut tick = tokio::time::interval(every);
        loop {
            tick.tick().await;
            let s = counters.snapshot();
            let file = StatsFile {
                pid,
                net_in: s.net_in,
                net_out: s.net_out,
            };
            if let Err(e) = file.write_atomic(&path) {
                tracing::warn!("stats file {}: {e}", path.display());
            }
        }
    })
}
