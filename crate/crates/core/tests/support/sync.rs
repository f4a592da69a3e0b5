use std::collections::{HashMap, HashSet};
use std::sync::Arc;
use std::time::Duration;

use edgebench_core::cloudsim::proto::{Api, EventKind, OVERLOAD};
use edgebench_core::cloudsim::{CloudConn, CloudServer, CloudState, Subscription};
use edgebench_core::net::NetCounters;
use edgebench_core::wire::MsgId;
use edgebench_core::CloudModel;
use serde_json::value::RawValue;
use tokio::task::JoinSet;

pub const WRITES: u32 = 10_000;
const WRITERS: u32 = 4;
const WINDOW: usize = 32;
pub const SUBSCRIBERS: usize = 4;

fn value(user: u32, seq: u32) -> Box<RawValue> {
    RawValue::from_string(format!(r#"{{"user":{user},"seq":{seq}}}"#)).unwrap()
}

pub async fn put_until_accepted(conn: &CloudConn, user: u32, seq: u32) -> (MsgId, u64) {
    let id = MsgId::derive(3, user, seq);
    let path = format!("runs/u{user:06}/{seq:06}");
    let v = value(user, seq);
    loop {
        let ack = conn.put(&path, &v, id, Api::Sdk).await.unwrap();
        match (ack.version, ack.error.as_deref()) {
            (Some(version), _) => return (id, version),
            (None, Some(OVERLOAD)) => tokio::time::sleep(Duration::from_millis(5)).await,
            other => panic!("unexpected ack {other:?}"),
        }
    }
}

async fn collect(mut sub: Subscription, expected: usize) -> Vec<(u64, MsgId)> {
    let snap = sub.next().await.unwrap().expect("snapshot");
    assert_eq!(snap.kind, EventKind::Snapshot);
    let mut out = Vec::with_capacity(expected);
    while out.len() < expected {
        let ev = tokio::time::timeout(Duration::from_secs(30), sub.next())
            .await
            .expect("event stream stalled")
            .unwrap()
            .expect("stream ended early");
        assert_eq!(ev.kind, EventKind::Write);
        out.push((ev.version, ev.origin_msg_id.expect("write events carry the origin")));
    }
    out
}

/// Writers push `WRITES` puts through the emulator while `SUBSCRIBERS`
/// clients watch: every subscriber sees each write once, in version order,
/// with the version its writer was acked.
pub async fn exactly_once_delivery() {
    let state = CloudState::new(CloudModel::default());
    let net = NetCounters::new();
    let server = CloudServer::bind(state.clone(), "127.0.0.1:0".parse().unwrap(), net.clone())
        .await
        .unwrap();
    let addr = server.local_addr();

    let mut subs = Vec::new();
    for i in 0..SUBSCRIBERS {
        let s = Subscription::open(addr, &format!("sub{i}"), "runs", net.clone()).await.unwrap();
        subs.push(tokio::spawn(collect(s, WRITES as usize)));
    }
    while state.subscriber_count() < SUBSCRIBERS {
        tokio::time::sleep(Duration::from_millis(5)).await;
    }

    let mut writers = JoinSet::new();
    for w in 0..WRITERS {
        let net = net.clone();
        writers.spawn(async move {
            let conn = Arc::new(CloudConn::connect(addr, net).await.unwrap());
            let mut acks = HashMap::new();
            let mut window = JoinSet::new();
            for seq in 0..WRITES / WRITERS {
                if window.len() >= WINDOW {
                    let (id, v) = window.join_next().await.unwrap().unwrap();
                    acks.insert(id, v);
                }
                let conn = conn.clone();
                window.spawn(async move { put_until_accepted(&conn, w, seq).await });
            }
            while let Some(r) = window.join_next().await {
                let (id, v) = r.unwrap();
                acks.insert(id, v);
            }
            acks
        });
    }
    let mut acked: HashMap<MsgId, u64> = HashMap::new();
    while let Some(r) = writers.join_next().await {
        acked.extend(r.unwrap());
    }
    assert_eq!(acked.len(), WRITES as usize);
    let versions: HashSet<u64> = acked.values().copied().collect();
    assert_eq!(versions.len(), WRITES as usize, "each write gets its own version");

    for s in subs {
        let events = s.await.unwrap();
        assert!(events.windows(2).all(|w| w[0].0 < w[1].0), "versions out of order");
        let ids: HashSet<MsgId> = events.iter().map(|e| e.1).collect();
        assert_eq!(ids.len(), WRITES as usize, "duplicate or missing notification");
        for (v, id) in &events {
            assert_eq!(acked.get(id), Some(v), "event version differs from ack");
        }
    }

    // retried writes are absorbed without new versions or notifications
    let before = state.version();
    let conn = CloudConn::connect(addr, net.clone()).await.unwrap();
    for seq in 0..200 {
        let (id, v) = put_until_accepted(&conn, 0, seq).await;
        assert_eq!(acked[&id], v);
    }
    assert_eq!(state.version(), before);
    assert_eq!(state.count_under("runs"), WRITES as usize);
    server.shutdown();
}

