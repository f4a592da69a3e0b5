use std::collections::{HashMap, VecDeque};
use std::io;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use serde_json::value::RawValue;
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;
use tokio::sync::oneshot;

use super::proto::{Api, DbEvent, DbPut, DbPutAck, DbSubscribe};
use crate::net::{read_frame, write_frame, NetCounters};
use crate::wire::{ErrorBody, Frame, Kind, MsgId};

#[derive(Default)]
struct Pending {
    puts: HashMap<MsgId, oneshot::Sender<DbPutAck>>,
    resets: VecDeque<oneshot::Sender<DbPutAck>>,
}

/// Pipelined writer connection: many puts may be in flight at once and are
/// matched to their acks by msg_id.
pub struct CloudConn {
    wr: tokio::sync::Mutex<OwnedWriteHalf>,
    pending: Arc<Mutex<Pending>>,
    reader: tokio::task::JoinHandle<()>,
    counters: Arc<NetCounters>,
}

fn closed() -> io::Error {
    io::Error::new(io::ErrorKind::ConnectionAborted, "cloud connection closed")
}

impl CloudConn {
    pub async fn connect(addr: SocketAddr, counters: Arc<NetCounters>) -> io::Result<CloudConn> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        let (rd, wr) = stream.into_split();
        let pending = Arc::new(Mutex::new(Pending::default()));
        let reader = tokio::spawn(read_acks(rd, pending.clone(), counters.clone()));
        Ok(CloudConn {
            wr: tokio::sync::Mutex::new(wr),
            pending,
            reader,
            counters,
        })
    }

    async fn send(&self, frame: &Frame) -> io::Result<()> {
        let mut wr = self.wr.lock().await;
        write_frame(&mut *wr, frame, &self.counters).await
    }

    /// Sends one put and waits for its ack. A returned ack may still carry
    /// an error (overload or protocol).
    pub async fn put(&self, path: &str, value: &RawValue, msg_id: MsgId, api: Api) -> io::Result<DbPutAck> {
        let (tx, rx) = oneshot::channel();
        self.pending.lock().unwrap().puts.insert(msg_id, tx);
        let frame = Frame::json(
            Kind::DbPut,
            &DbPut {
                path: path.to_string(),
                value: value.to_owned(),
                msg_id,
                api,
            },
        );
        if let Err(e) = self.send(&frame).await {
            self.pending.lock().unwrap().puts.remove(&msg_id);
            return Err(e);
        }
        rx.await.map_err(|_| closed())
    }

    /// Resets the database and returns the current version.
    pub async fn reset(&self) -> io::Result<u64> {
        let (tx, rx) = oneshot::channel();
        self.pending.lock().unwrap().resets.push_back(tx);
        self.send(&Frame::new(Kind::DbReset, b"{}".to_vec())).await?;
        let ack = rx.await.map_err(|_| closed())?;
        ack.version.ok_or_else(|| io::Error::other("reset not acknowledged"))
    }

    pub fn is_closed(&self) -> bool {
        self.reader.is_finished()
    }
}

impl Drop for CloudConn {
    fn drop(&mut self) {
        self.reader.abort();
    }
}

async fn read_acks(mut rd: OwnedReadHalf, pending: Arc<Mutex<Pending>>, counters: Arc<NetCounters>) {
    loop {
        let frame = match read_frame(&mut rd, &counters).await {
            Ok(Some(f)) => f,
            _ => break,
        };
        match frame.kind {
            Kind::DbPutAck => {
                let Ok(ack) = frame.parse::<DbPutAck>() else {
                    tracing::warn!("malformed DB_PUT_ACK");
                    continue;
                };
                let mut p = pending.lock().unwrap();
                let waiter = match ack.msg_id {
                    Some(id) => p.puts.remove(&id),
                    None => p.resets.pop_front(),
                };
                if let Some(w) = waiter {
                    let _ = w.send(ack);
                }
            }
            Kind::Error => {
                let detail = frame.parse::<ErrorBody>().map(|e| e.detail).unwrap_or_default();
                tracing::warn!("cloud error frame: {detail}");
            }
            other => tracing::warn!("unexpected {other:?} on cloud writer connection"),
        }
    }
    // dropping the senders fails every waiter
    let mut p = pending.lock().unwrap();
    p.puts.clear();
    p.resets.clear();
}

/// Event stream of one subscription on its own connection.
pub struct Subscription {
    rd: OwnedReadHalf,
    _wr: OwnedWriteHalf,
    counters: Arc<NetCounters>,
}

impl Subscription {
    pub async fn open(
        addr: SocketAddr,
        client: &str,
        prefix: &str,
        counters: Arc<NetCounters>,
    ) -> io::Result<Subscription> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        let (rd, mut wr) = stream.into_split();
        let req = Frame::json(
            Kind::DbSubscribe,
            &DbSubscribe {
                client: client.to_string(),
                prefix: prefix.to_string(),
            },
        );
        write_frame(&mut wr, &req, &counters).await?;
        Ok(Subscription { rd, _wr: wr, counters })
    }

    /// Next event, or `None` once the emulator ends the stream.
    pub async fn next(&mut self) -> io::Result<Option<DbEvent>> {
        match read_frame(&mut self.rd, &self.counters).await? {
            None => Ok(None),
            Some(f) if f.kind == Kind::DbEvent => f.parse().map(Some).map_err(io::Error::other),
            Some(f) => {
                let detail = f.parse::<ErrorBody>().map(|e| e.detail).unwrap_or_default();
                Err(io::Error::other(format!("subscription rejected: {detail}")))
            }
        }
    }
}
