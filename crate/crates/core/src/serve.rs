//! Entry points of the component processes launched by the orchestrator.
//!
//! Each component binds, prints `LISTENING <addr>` on stdout and then reads
//! line commands from stdin:
//!
//! * `stop` (or EOF): shut down cleanly.
//! * `drain <ms>` (aggregator only): stop-and-drain and print
//!   `DRAINED <report json>`; the process stays up until `stop`.

use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use tokio::io::{AsyncBufReadExt, BufReader};

use crate::aggregator::{Aggregator, AggregatorConfig};
use crate::broker::{Broker, BrokerConfig, BrokerServer};
use crate::cloudsim::{CloudConfig, CloudServer, CloudState};
use crate::net::{spawn_stats_writer, NetCounters};

/// Result of a component entry point.
pub type ServeResult = Result<(), Box<dyn std::error::Error + Send + Sync>>;

const STATS_EVERY: Duration = Duration::from_millis(200);

fn announce(line: &str) -> io::Result<()> {
    let mut out = io::stdout().lock();
    writeln!(out, "{line}")?;
    out.flush()
}

async fn next_command(lines: &mut tokio::io::Lines<BufReader<tokio::io::Stdin>>) -> Option<String> {
    match lines.next_line().await {
        Ok(Some(l)) => Some(l.trim().to_string()),
        _ => None,
    }
}

fn stats_task(stats: Option<PathBuf>, counters: &Arc<NetCounters>) -> Option<tokio::task::JoinHandle<()>> {
    stats.map(|p| spawn_stats_writer(p, counters.clone(), STATS_EVERY))
}

fn final_stats(stats: &Option<PathBuf>, counters: &NetCounters) {
    if let Some(p) = stats {
        let s = counters.snapshot();
        let _ = crate::net::StatsFile {
            pid: std::process::id(),
            net_in: s.net_in,
            net_out: s.net_out,
        }
        .write_atomic(p);
    }
}

pub async fn broker(cfg: BrokerConfig, stats: Option<PathBuf>) -> ServeResult {
    let counters = NetCounters::new();
    let port = cfg.port;
    let broker = Arc::new(Broker::open(cfg)?);
    let server = BrokerServer::bind(broker.clone(), SocketAddr::from(([127, 0, 0, 1], port)), counters.clone()).await?;
    let writer = stats_task(stats.clone(), &counters);
    announce(&format!("LISTENING {}", server.local_addr()))?;
    let mut lines = BufReader::new(tokio::io::stdin()).lines();
    while let Some(cmd) = next_command(&mut lines).await {
        match cmd.as_str() {
            "stop" => break,
            "" => {}
            other => tracing::warn!("broker: unknown command {other:?}"),
        }
    }
    server.shutdown();
    broker.flush()?;
    if let Some(w) = writer {
        w.abort();
    }
    final_stats(&stats, &counters);
    Ok(())
}

pub async fn cloud(cfg: CloudConfig, stats: Option<PathBuf>, journal: Option<PathBuf>) -> ServeResult {
    cfg.model.validate()?;
    let counters = NetCounters::new();
    let state = CloudState::new(cfg.model.clone());
    let server = CloudServer::bind(state.clone(), SocketAddr::from(([127, 0, 0, 1], cfg.port)), counters.clone()).await?;
    let writer = stats_task(stats.clone(), &counters);
    announce(&format!("LISTENING {}", server.local_addr()))?;
    let mut lines = BufReader::new(tokio::io::stdin()).lines();
    while let Some(cmd) = next_command(&mut lines).await {
        match cmd.as_str() {
            "stop" => break,
            "" => {}
            other => tracing::warn!("cloud: unknown command {other:?}"),
        }
    }
    server.shutdown();
    if let Some(w) = writer {
        w.abort();
    }
    final_stats(&stats, &counters);
    if let Some(j) = journal {
        state.write_journal(&j)?;
    }
    Ok(())
}

pub async fn aggregator(cfg: AggregatorConfig, stats: Option<PathBuf>) -> ServeResult {
    let counters = NetCounters::new();
    let agg = Aggregator::start(cfg, counters.clone()).await?;
    let writer = stats_task(stats.clone(), &counters);
    announce("LISTENING -")?;
    let mut lines = BufReader::new(tokio::io::stdin()).lines();
    let mut agg = Some(agg);
    while let Some(cmd) = next_command(&mut lines).await {
        let mut words = cmd.split_whitespace();
        match (words.next(), words.next()) {
            (Some("stop"), _) => break,
            (Some("drain"), ms) => {
                let ms: u64 = ms.and_then(|m| m.parse().ok()).unwrap_or(10_000);
                let Some(a) = agg.take() else {
                    tracing::warn!("aggregator: already drained");
                    continue;
                };
                let report = a.stop_and_drain(Duration::from_millis(ms)).await;
                final_stats(&stats, &counters);
                announce(&format!("DRAINED {}", serde_json::to_string(&report)?))?;
            }
            (Some("stats"), _) => {
                if let Some(a) = &agg {
                    announce(&format!("STATS {}", serde_json::to_string(&a.stats())?))?;
                }
            }
            (None, _) => {}
            (Some(other), _) => tracing::warn!("aggregator: unknown command {other:?}"),
        }
    }
    if let Some(a) = agg {
        a.abort();
    }
    if let Some(w) = writer {
        w.abort();
    }
    final_stats(&stats, &counters);
    Ok(())
}
