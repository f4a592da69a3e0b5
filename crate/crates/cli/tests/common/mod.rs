//! Helpers shared by the cli test targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use edgebench_core::broker::BrokerClient;
use edgebench_core::net::NetCounters;
use edgebench_core::orchestrator::launch::Component;
use edgebench_core::wire::{build_payload, MsgId};
use edgebench_core::{BrokerConfig, Config};

pub fn exe() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_edgebench"))
}

/// A configuration with ephemeral ports and short pauses, writing under `dir`.
pub fn quick_config(dir: &Path) -> Config {
    let mut c = Config::default();
    c.broker.port = 0;
    c.cloud.port = 0;
    c.workload.interarrival_mean_ms = 20.0;
    c.workload.quiescence_ms = 3000;
    c.output.dir = dir.to_path_buf();
    c.output.settle_ms = 200;
    c
}

pub fn write_config(path: &Path, cfg: &Config) {
    std::fs::write(path, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
}

async fn launch_broker(dir: &Path, tag: &str) -> Component {
    let cfg = BrokerConfig {
        port: 0,
        data_dir: dir.join("data"),
        ..Default::default()
    };
    let cfg_path = dir.join("broker.json");
    std::fs::write(&cfg_path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    Component::launch(
        &exe(),
        "broker",
        &cfg_path,
        &dir.join(format!("{tag}.stats")),
        &[],
        &dir.join(format!("{tag}.log")),
    )
    .await
    .unwrap()
}

type Acked = Vec<(u64, Vec<u8>)>;

/// Produces to a broker process, SIGKILLs it mid-stream, restarts it over
/// the same data directory and checks that every acknowledged record is
/// present, unchanged, at its acknowledged offset, with no gaps. Returns the
/// number of acknowledged records.
pub async fn crash_after_ack() -> usize {
    let dir = tempfile::tempdir().unwrap();
    let broker = launch_broker(dir.path(), "first").await;
    let addr = broker.addr.unwrap();
    let acked: Arc<Mutex<Acked>> = Arc::default();
    let producer = {
        let acked = acked.clone();
        tokio::spawn(async move {
            let mut c = BrokerClient::connect(addr, NetCounters::new()).await.unwrap();
            for seq in 0.. {
                let env = build_payload(MsgId::derive(11, 0, seq), 0, seq, 1, 1024).unwrap().payload;
                match c.produce("bench", &env).await {
                    Ok(off) => acked.lock().unwrap().push((off, env)),
                    Err(_) => break,
                }
            }
        })
    };
    tokio::time::sleep(Duration::from_millis(400)).await;
    broker.kill().await.unwrap();
    producer.await.unwrap();
    let acked = std::mem::take(&mut *acked.lock().unwrap());
    assert!(!acked.is_empty(), "nothing was acknowledged before the crash");

    let broker = launch_broker(dir.path(), "second").await;
    let mut c = BrokerClient::connect(broker.addr.unwrap(), NetCounters::new()).await.unwrap();
    let mut stored = Vec::new();
    loop {
        let r = c.fetch("bench", stored.len() as u64, 512, Duration::ZERO).await.unwrap();
        if r.records.is_empty() {
            break;
        }
        for rec in r.records {
            assert_eq!(rec.offset, stored.len() as u64, "gap after recovery");
            stored.push(rec.envelope);
        }
    }
    for (off, env) in &acked {
        let got = stored.get(*off as usize).expect("acknowledged record lost");
        assert_eq!(got, env, "acknowledged record changed at offset {off}");
    }
    broker.stop(Duration::from_secs(10)).await.unwrap();
    acked.len()
}
