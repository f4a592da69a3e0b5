use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;

use super::proto::{CommitReq, FetchReq, FetchResp, ProduceAck, ProduceReq};
use crate::net::{read_frame, write_frame, NetCounters};
use crate::wire::{ErrorBody, Frame, Kind};

/// Request/response broker client over one connection.
pub struct BrokerClient {
    rd: OwnedReadHalf,
    wr: OwnedWriteHalf,
    counters: Arc<NetCounters>,
}

fn remote_error(frame: &Frame) -> io::Error {
    let detail = frame
        .parse::<ErrorBody>()
        .map(|e| format!("{}: {}", e.code, e.detail))
        .unwrap_or_else(|e| e.to_string());
    io::Error::other(detail)
}

impl BrokerClient {
    pub async fn connect(addr: SocketAddr, counters: Arc<NetCounters>) -> io::Result<BrokerClient> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        let (rd, wr) = stream.into_split();
        Ok(BrokerClient { rd, wr, counters })
    }

    async fn call(&mut self, req: Frame, expect: Kind) -> io::Result<Frame> {
        write_frame(&mut self.wr, &req, &self.counters).await?;
        let resp = read_frame(&mut self.rd, &self.counters)
            .await?
            .ok_or_else(|| io::Error::from(io::ErrorKind::UnexpectedEof))?;
        if resp.kind == expect {
            Ok(resp)
        } else {
            Err(remote_error(&resp))
        }
    }

    pub async fn produce(&mut self, topic: &str, envelope: &[u8]) -> io::Result<u64> {
        let req = Frame::json(
            Kind::Produce,
            &ProduceReq {
                topic: topic.to_string(),
                envelope: envelope.to_vec(),
            },
        );
        let resp = self.call(req, Kind::ProduceAck).await?;
        let ack: ProduceAck = resp.parse().map_err(io::Error::other)?;
        Ok(ack.offset)
    }

    pub async fn fetch(
        &mut self,
        topic: &str,
        from: u64,
        max: u32,
        wait: Duration,
    ) -> io::Result<FetchResp> {
        let req = Frame::json(
            Kind::Fetch,
            &FetchReq {
                topic: topic.to_string(),
                from,
                max,
                wait_ms: wait.as_millis() as u64,
            },
        );
        let resp = self.call(req, Kind::FetchResp).await?;
        resp.parse().map_err(io::Error::other)
    }

    async fn commit_call(&mut self, group: &str, topic: &str, offset: Option<u64>) -> io::Result<u64> {
        let req = Frame::json(
            Kind::CommitOffset,
            &CommitReq {
                group: group.to_string(),
                topic: topic.to_string(),
                offset,
            },
        );
        let resp = self.call(req, Kind::CommitOffset).await?;
        let body: CommitReq = resp.parse().map_err(io::Error::other)?;
        Ok(body.offset.unwrap_or(0))
    }

    /// Commits `offset` and returns the value the broker now stores.
    pub async fn commit(&mut self, group: &str, topic: &str, offset: u64) -> io::Result<u64> {
        self.commit_call(group, topic, Some(offset)).await
    }

    pub async fn committed(&mut self, group: &str, topic: &str) -> io::Result<u64> {
        self.commit_call(group, topic, None).await
    }
}
