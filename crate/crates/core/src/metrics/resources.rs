//! Per-second CPU, memory and network sampling of component processes.
//!
//! CPU and resident memory come from `/proc/<pid>/stat` and
//! `/proc/<pid>/status`; network counters are the application-level byte
//! counts each component publishes to its stats file.

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::sync::watch;

use super::EmptyInput;
use crate::clock::{clock_ticks_per_sec, mono_ns};
use crate::net::StatsFile;

/// Row name of the edge-node total (broker plus aggregator).
pub const COMBINED: &str = "combined";
/// Components summed into the combined row.
pub const EDGE_COMPONENTS: [&str; 2] = ["broker", "aggregator"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceSample {
    pub run_id: String,
    pub ts_s: u64,
    pub component: String,
    /// 100 = one core fully busy.
    pub cpu_pct: f64,
    pub mem_bytes: u64,
    pub net_in_cum: u64,
    pub net_out_cum: u64,
    pub dead: bool,
}

/// A process to sample.
#[derive(Debug, Clone)]
pub struct Watched {
    pub component: String,
    pub pid: u32,
    /// Stats file with the component's byte counters.
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcStat {
    /// utime + stime in clock ticks.
    pub cpu_ticks: u64,
    pub rss_bytes: u64,
    pub zombie: bool,
}

/// Parses the utime/stime/state fields of a `/proc/<pid>/stat` line. The
/// command name may contain spaces and parentheses, so fields are counted
/// from the last `)`.
pub fn parse_proc_stat(line: &str) -> Option<(u64, bool)> {
    let rest = &line[line.rfind(')')? + 1..];
    let fields: Vec<&str> = rest.split_whitespace().collect();
    // fields[0] is the state (field 3); utime and stime are fields 14 and 15
    let state = *fields.first()?;
    let utime: u64 = fields.get(11)?.parse().ok()?;
    let stime: u64 = fields.get(12)?.parse().ok()?;
    Some((utime + stime, state == "Z" || state == "X"))
}

/// VmRSS in bytes from `/proc/<pid>/status`.
pub fn parse_vm_rss(status: &str) -> Option<u64> {
    let line = status.lines().find(|l| l.starts_with("VmRSS:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

pub fn read_proc(pid: u32) -> io::Result<ProcStat> {
    let stat = std::fs::read_to_string(format!("/proc/{pid}/stat"))?;
    let (cpu_ticks, zombie) =
        parse_proc_stat(&stat).ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "bad stat line"))?;
    let status = std::fs::read_to_string(format!("/proc/{pid}/status"))?;
    Ok(ProcStat {
        cpu_ticks,
        rss_bytes: parse_vm_rss(&status).unwrap_or(0),
        zombie,
    })
}

struct Track {
    w: Watched,
    last_ticks: Option<u64>,
    last_net: (u64, u64),
}

/// Writes one row per component (plus the combined row) per interval.
pub struct ResourceSampler {
    stop: watch::Sender<bool>,
    task: tokio::task::JoinHandle<io::Result<Vec<ResourceSample>>>,
}

impl ResourceSampler {
    pub fn start(run_id: String, watched: Vec<Watched>, interval: Duration, csv_path: &Path) -> io::Result<ResourceSampler> {
        let mut writer = csv::Writer::from_path(csv_path)?;
        let (stop, mut stop_rx) = watch::channel(false);
        let task = tokio::spawn(async move {
            let hz = clock_ticks_per_sec() as f64;
            let mut tracks: Vec<Track> = watched
                .into_iter()
                .map(|w| Track {
                    w,
                    last_ticks: None,
                    last_net: (0, 0),
                })
                .collect();
            let mut rows = Vec::new();
            // prime CPU counters so the first row reports a real delta
            for t in &mut tracks {
                t.last_ticks = read_proc(t.w.pid).ok().map(|p| p.cpu_ticks);
            }
            let mut last_wall = mono_ns();
            let mut tick = tokio::time::interval_at(tokio::time::Instant::now() + interval, interval);
            let mut ts_s = 0u64;
            loop {
                let stopping = tokio::select! {
                    _ = tick.tick() => false,
                    _ = stop_rx.changed() => true,
                };
                let now = mono_ns();
                // the final row covers the partial interval before stop
                if stopping && (!rows.is_empty() && now - last_wall < 50_000_000) {
                    break;
                }
                ts_s += 1;
                let wall_s = ((now - last_wall) as f64 / 1e9).max(1e-3);
                last_wall = now;
                let mut batch = Vec::with_capacity(tracks.len() + 1);
                for t in &mut tracks {
                    let proc_ = read_proc(t.w.pid).ok().filter(|p| !p.zombie);
                    if let Some(path) = &t.w.stats {
                        if let Ok(s) = StatsFile::read(path) {
                            t.last_net = (t.last_net.0.max(s.net_in), t.last_net.1.max(s.net_out));
                        }
                    }
                    let (cpu_pct, mem_bytes, dead) = match proc_ {
                        Some(p) => {
                            let d = t.last_ticks.map_or(0, |l| p.cpu_ticks.saturating_sub(l));
                            t.last_ticks = Some(p.cpu_ticks);
                            (d as f64 / hz / wall_s * 100.0, p.rss_bytes, false)
                        }
                        None => (0.0, 0, true),
                    };
                    batch.push(ResourceSample {
                        run_id: run_id.clone(),
                        ts_s,
                        component: t.w.component.clone(),
                        cpu_pct,
                        mem_bytes,
                        net_in_cum: t.last_net.0,
                        net_out_cum: t.last_net.1,
                        dead,
                    });
                }
                if let Some(c) = combine(&batch, ts_s, &run_id) {
                    batch.push(c);
                }
                for r in &batch {
                    writer.serialize(r)?;
                }
                writer.flush()?;
                rows.extend(batch);
                if stopping {
                    break;
                }
            }
            if rows.is_empty() {
                writer.write_record(["run_id", "ts_s", "component", "cpu_pct", "mem_bytes", "net_in_cum", "net_out_cum", "dead"])?;
                writer.flush()?;
            }
            Ok(rows)
        });
        Ok(ResourceSampler { stop, task })
    }

    pub async fn stop(self) -> io::Result<Vec<ResourceSample>> {
        let _ = self.stop.send(true);
        self.task.await.map_err(io::Error::other)?
    }
}

fn combine(batch: &[ResourceSample], ts_s: u64, run_id: &str) -> Option<ResourceSample> {
    let edge: Vec<&ResourceSample> = batch
        .iter()
        .filter(|r| EDGE_COMPONENTS.contains(&r.component.as_str()))
        .collect();
    if edge.is_empty() {
        return None;
    }
    Some(ResourceSample {
        run_id: run_id.to_string(),
        ts_s,
        component: COMBINED.to_string(),
        cpu_pct: edge.iter().map(|r| r.cpu_pct).sum(),
        mem_bytes: edge.iter().map(|r| r.mem_bytes).sum(),
        net_in_cum: edge.iter().map(|r| r.net_in_cum).sum(),
        net_out_cum: edge.iter().map(|r| r.net_out_cum).sum(),
        dead: edge.iter().any(|r| r.dead),
    })
}

pub fn read_resources(path: &Path) -> io::Result<Vec<ResourceSample>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(io::Error::from)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    fn of(values: &[f64]) -> Stat {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for &v in values {
            min = min.min(v);
            max = max.max(v);
            sum += v;
        }
        Stat {
            mean: sum / values.len() as f64,
            min,
            max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceAggregate {
    pub component: String,
    pub samples: usize,
    pub cpu_pct: Stat,
    pub mem_bytes: Stat,
    pub net_in_total: u64,
    pub net_out_total: u64,
    /// Largest per-interval increase of net_in + net_out, in bytes per second.
    pub net_peak_rate: f64,
}

/// Mean/min/max per component over its rows (in `ts_s` order), net totals
/// and peak per-second network rate. The first row's rate is measured from
/// zero one second earlier.
pub fn aggregate_resources(samples: &[ResourceSample]) -> Result<Vec<ResourceAggregate>, EmptyInput> {
    if samples.is_empty() {
        return Err(EmptyInput);
    }
    let mut by: BTreeMap<&str, Vec<&ResourceSample>> = BTreeMap::new();
    for s in samples {
        by.entry(s.component.as_str()).or_default().push(s);
    }
    Ok(by
        .into_iter()
        .map(|(component, mut rows)| {
            rows.sort_by_key(|r| r.ts_s);
            let cpu: Vec<f64> = rows.iter().map(|r| r.cpu_pct).collect();
            let mem: Vec<f64> = rows.iter().map(|r| r.mem_bytes as f64).collect();
            let mut prev_ts = rows[0].ts_s.saturating_sub(1);
            let mut prev_net = 0u64;
            let mut peak = 0f64;
            for r in &rows {
                let net = r.net_in_cum + r.net_out_cum;
                let dt = r.ts_s.saturating_sub(prev_ts).max(1) as f64;
                peak = peak.max(net.saturating_sub(prev_net) as f64 / dt);
                prev_ts = r.ts_s;
                prev_net = net;
            }
            let last = rows[rows.len() - 1];
            ResourceAggregate {
                component: component.to_string(),
                samples: rows.len(),
                cpu_pct: Stat::of(&cpu),
                mem_bytes: Stat::of(&mem),
                net_in_total: last.net_in_cum,
                net_out_total: last.net_out_cum,
                net_peak_rate: peak,
            }
        })
        .collect())
}
