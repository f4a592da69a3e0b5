use std::collections::HashSet;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use edgebench_core::aggregator::Aggregator;
use edgebench_core::broker::{BrokerClient, BrokerServer};
use edgebench_core::cloudsim::{CloudServer, CloudState};
use edgebench_core::net::NetCounters;
use edgebench_core::wire::{build_payload, MsgId};
use edgebench_core::{AggregatorConfig, Broker, BrokerConfig, CloudModel};

const USERS: u32 = 10;

struct Rig {
    broker_addr: SocketAddr,
    _broker: BrokerServer,
    state: Arc<CloudState>,
    cloud: Option<CloudServer>,
    cloud_addr: SocketAddr,
    net: Arc<NetCounters>,
}

async fn rig(dir: &Path) -> Rig {
    let net = NetCounters::new();
    let broker = Arc::new(
        Broker::open(BrokerConfig {
            data_dir: dir.join("broker"),
            ..Default::default()
        })
        .unwrap(),
    );
    let broker_srv = BrokerServer::bind(broker, "127.0.0.1:0".parse().unwrap(), net.clone()).await.unwrap();
    let state = CloudState::new(CloudModel::default());
    let cloud = CloudServer::bind(state.clone(), "127.0.0.1:0".parse().unwrap(), net.clone()).await.unwrap();
    Rig {
        broker_addr: broker_srv.local_addr(),
        _broker: broker_srv,
        cloud_addr: cloud.local_addr(),
        cloud: Some(cloud),
        state,
        net,
    }
}

fn agg_config(r: &Rig, dir: &Path) -> AggregatorConfig {
    AggregatorConfig {
        broker_addr: r.broker_addr,
        cloud_addr: r.cloud_addr,
        queue_dir: dir.join("queue"),
        backoff_base_ms: 20,
        backoff_max_ms: 200,
        ..Default::default()
    }
}

/// Produces `per_user` records for each user at roughly `gap` intervals and
/// returns the produced ids.
async fn produce(addr: SocketAddr, net: Arc<NetCounters>, per_user: u32, gap: Duration) -> HashSet<MsgId> {
    let mut c = BrokerClient::connect(addr, net).await.unwrap();
    let mut ids = HashSet::new();
    for seq in 0..per_user {
        for user in 0..USERS {
            let id = MsgId::derive(5, user, seq);
            let env = build_payload(id, user, seq, 1, 512).unwrap();
            c.produce("bench", &env.payload).await.unwrap();
            ids.insert(id);
        }
        tokio::time::sleep(gap).await;
    }
    ids
}

fn cloud_ids(state: &CloudState) -> HashSet<MsgId> {
    state.applied().into_keys().collect()
}

/// Shuts the cloud endpoint down mid-stream and brings it back on the same
/// address; the aggregator must deliver every produced record.
pub async fn cloud_outage() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rig(dir.path()).await;
    let agg = Aggregator::start(agg_config(&r, dir.path()), r.net.clone()).await.unwrap();
    let producer = tokio::spawn(produce(r.broker_addr, r.net.clone(), 200, Duration::from_millis(5)));

    tokio::time::sleep(Duration::from_millis(400)).await;
    r.cloud.take().unwrap().shutdown();
    tokio::time::sleep(Duration::from_millis(1500)).await;
    let synced_during_outage = r.state.applied().len();
    tokio::time::sleep(Duration::from_millis(300)).await;
    assert_eq!(r.state.applied().len(), synced_during_outage, "cloud is unreachable");
    r.cloud = Some(
        CloudServer::bind(r.state.clone(), r.cloud_addr, r.net.clone())
            .await
            .expect("rebind the same address"),
    );

    let produced = producer.await.unwrap();
    let stats_before = agg.stats();
    let report = agg.stop_and_drain(Duration::from_secs(60)).await;
    assert_eq!(report.remaining, 0, "{report:?}");
    assert_eq!(report.failed, 0);
    assert!(stats_before.retries > 0, "the outage must have forced retries");
    assert_eq!(cloud_ids(&r.state), produced);
    assert_eq!(r.state.count_under("runs"), produced.len());
}

/// Aborts the aggregator mid-stream and restarts it over the same queue.
pub async fn aggregator_crash() {
    let dir = tempfile::tempdir().unwrap();
    let r = rig(dir.path()).await;
    let agg = Aggregator::start(agg_config(&r, dir.path()), r.net.clone()).await.unwrap();
    let producer = tokio::spawn(produce(r.broker_addr, r.net.clone(), 150, Duration::from_millis(5)));

    tokio::time::sleep(Duration::from_millis(500)).await;
    agg.abort();
    let partial = r.state.applied().len();
    tokio::time::sleep(Duration::from_millis(300)).await;
    let agg = Aggregator::start(agg_config(&r, dir.path()), r.net.clone()).await.unwrap();

    let produced = producer.await.unwrap();
    assert!(partial < produced.len());
    let report = agg.stop_and_drain(Duration::from_secs(60)).await;
    assert_eq!(report.remaining, 0, "{report:?}");
    assert_eq!(cloud_ids(&r.state), produced);
    // replays after the crash hit the idempotent path: one version per record
    assert_eq!(r.state.version(), produced.len() as u64);
}
