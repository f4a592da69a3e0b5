use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use edgebench_core::orchestrator::{self, Config, RunMatrix, RunSpec};
use edgebench_core::{serve, AggregatorConfig, BrokerConfig, CloudConfig, Scenario};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "edgebench", version, about = "Edge/cloud latency benchmark harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute a single run.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        scenario: Option<Scenario>,
        #[arg(long)]
        users: Option<u32>,
        #[arg(long)]
        bytes: Option<usize>,
        /// Drop samples sent during the first N seconds from the summary.
        #[arg(long)]
        warmup_discard_s: Option<f64>,
        /// Repetition index (selects the seed offset).
        #[arg(long, default_value_t = 0)]
        rep: u32,
    },
    /// Execute the full sweep matrix.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rebuild comparison and knee reports from existing run directories.
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 10_000.0)]
        knee_threshold_ms: f64,
    },
    /// Run one component process (used by the orchestrator).
    #[command(hide = true)]
    Serve {
        component: Component,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long)]
        journal: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Component {
    Broker,
    Cloud,
    Aggregator,
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_config(path: &Path) -> Result<Config> {
    let cfg = Config::load(path)?;
    if let Err(e) = cfg.validate() {
        bail!("{}: {e}", path.display());
    }
    Ok(cfg)
}

async fn serve_component(component: Component, config: &Path, stats: Option<PathBuf>, journal: Option<PathBuf>) -> Result<()> {
    let r = match component {
        Component::Broker => serve::broker(load_json::<BrokerConfig>(config)?, stats).await,
        Component::Cloud => serve::cloud(load_json::<CloudConfig>(config)?, stats, journal).await,
        Component::Aggregator => serve::aggregator(load_json::<AggregatorConfig>(config)?, stats).await,
    };
    r.map_err(|e| anyhow::anyhow!(e))
}

async fn main_inner(cli: Cli) -> Result<bool> {
    let exe = std::env::current_exe().context("locating own executable")?;
    match cli.cmd {
        Cmd::Run {
            config,
            scenario,
            users,
            bytes,
            warmup_discard_s,
            rep,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = warmup_discard_s {
                cfg.workload.warmup_discard_s = s;
            }
            let spec = RunSpec {
                scenario: scenario.unwrap_or(cfg.workload.scenario),
                users: users.unwrap_or(cfg.workload.users),
                payload_bytes: bytes.unwrap_or(cfg.workload.payload_bytes),
                rep,
            };
            cfg.workload.scenario = spec.scenario;
            cfg.workload.users = spec.users;
            cfg.workload.payload_bytes = spec.payload_bytes;
            if let Err(e) = cfg.validate() {
                bail!("{e}");
            }
            let out = orchestrator::run_once(&cfg, &exe, spec).await;
            let _ = std::fs::remove_dir(cfg.scratch_dir());
            if let Some(e) = &out.error {
                bail!("{}: {e}", spec.run_id());
            }
            let s = out.summary.as_ref().expect("summary on success");
            println!("{}", serde_json::to_string_pretty(s)?);
            eprintln!("artifacts: {}", out.dir.display());
            Ok(s.conservation.holds)
        }
        Cmd::Sweep { config } => {
            let cfg = load_config(&config)?;
            let matrix = RunMatrix::from_sweep(&cfg.sweep);
            let out = orchestrator::run_matrix(&cfg, &exe, &matrix).await?;
            println!("{}", serde_json::to_string_pretty(&out.report)?);
            let holds = out
                .runs
                .iter()
                .all(|r| r.summary.as_ref().is_some_and(|s| s.conservation.holds));
            Ok(holds)
        }
        Cmd::Report { dir, knee_threshold_ms } => {
            let report = orchestrator::report_dir(&dir, knee_threshold_ms)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(true)
        }
        Cmd::Serve {
            component,
            config,
            stats,
            journal,
        } => {
            serve_component(component, &config, stats, journal).await?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let cli = Cli::parse();
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match rt.block_on(main_inner(cli)) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("conservation check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
