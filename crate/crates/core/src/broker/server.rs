use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinSet;

use super::proto::{CommitReq, FetchReq, FetchResp, ProduceAck, ProduceReq, WireRecord};
use super::{Broker, BrokerError};
use crate::net::{read_frame, write_frame, NetCounters};
use crate::wire::{ErrorBody, Frame, Kind};

/// TCP front end of a [`Broker`].
pub struct BrokerServer {
    addr: SocketAddr,
    accept: tokio::task::JoinHandle<()>,
}

impl BrokerServer {
    pub async fn bind(
        broker: Arc<Broker>,
        addr: SocketAddr,
        counters: Arc<NetCounters>,
    ) -> io::Result<BrokerServer> {
        let listener = TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let accept = tokio::spawn(async move {
            let mut conns = JoinSet::new();
            loop {
                tokio::select! {
                    accepted = listener.accept() => match accepted {
                        Ok((stream, _)) => {
                            let _ = stream.set_nodelay(true);
                            conns.spawn(serve_conn(broker.clone(), stream, counters.clone()));
                        }
                        Err(e) => tracing::warn!("broker accept: {e}"),
                    },
                    Some(_) = conns.join_next(), if !conns.is_empty() => {}
                }
            }
        });
        Ok(BrokerServer { addr, accept })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting and drops every open connection.
    pub fn shutdown(self) {
        self.accept.abort();
    }
}

impl Drop for BrokerServer {
    fn drop(&mut self) {
        self.accept.abort();
    }
}

fn error_frame(e: &BrokerError) -> Frame {
    ErrorBody::frame(e.code(), e.to_string())
}

async fn handle(broker: &Broker, frame: Frame) -> Frame {
    match frame.kind {
        Kind::Produce => {
            let req: ProduceReq = match frame.parse() {
                Ok(r) => r,
                Err(e) => return error_frame(&e.into()),
            };
            match broker.produce(&req.topic, &req.envelope) {
                Ok(offset) => Frame::json(Kind::ProduceAck, &ProduceAck { offset }),
                Err(e) => error_frame(&e),
            }
        }
        Kind::Fetch => {
            let req: FetchReq = match frame.parse() {
                Ok(r) => r,
                Err(e) => return error_frame(&e.into()),
            };
            match broker
                .fetch(&req.topic, req.from, req.max, Duration::from_millis(req.wait_ms))
                .await
            {
                Ok(r) => Frame::json(
                    Kind::FetchResp,
                    &FetchResp {
                        records: r
                            .records
                            .into_iter()
                            .map(|r| WireRecord {
                                offset: r.offset,
                                envelope: r.envelope.to_vec(),
                            })
                            .collect(),
                        topic_unknown: r.topic_unknown,
                        next_offset: r.next_offset,
                    },
                ),
                Err(e) => error_frame(&e),
            }
        }
        Kind::CommitOffset => {
            let req: CommitReq = match frame.parse() {
                Ok(r) => r,
                Err(e) => return error_frame(&e.into()),
            };
            let stored = match req.offset {
                Some(o) => broker.commit_offset(&req.group, &req.topic, o),
                None => Ok(broker.committed(&req.group, &req.topic)),
            };
            match stored {
                Ok(o) => Frame::json(
                    Kind::CommitOffset,
                    &CommitReq {
                        group: req.group,
                        topic: req.topic,
                        offset: Some(o),
                    },
                ),
                Err(e) => error_frame(&e),
            }
        }
        other => ErrorBody::frame("protocol", format!("unexpected frame {other:?} at broker")),
    }
}

async fn serve_conn(broker: Arc<Broker>, stream: TcpStream, counters: Arc<NetCounters>) {
    let (mut rd, mut wr) = stream.into_split();
    loop {
        let frame = match read_frame(&mut rd, &counters).await {
            Ok(Some(f)) => f,
            Ok(None) => return,
            Err(e) => {
                let _ = write_frame(&mut wr, &ErrorBody::frame("protocol", e.to_string()), &counters).await;
                return;
            }
        };
        let resp = handle(&broker, frame).await;
        if write_frame(&mut wr, &resp, &counters).await.is_err() {
            return;
        }
    }
}
