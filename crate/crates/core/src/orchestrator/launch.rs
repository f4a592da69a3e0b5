//! Component processes: launch, line protocol, stop.

use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::Stdio;
use std::time::Duration;

use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader, Lines};
use tokio::process::{Child, ChildStdin, ChildStdout, Command};

const STARTUP_TIMEOUT: Duration = Duration::from_secs(15);

/// A running component process.
pub struct Component {
    pub name: String,
    pub pid: u32,
    /// Bound address, if the component listens.
    pub addr: Option<SocketAddr>,
    pub stats_path: PathBuf,
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: Lines<BufReader<ChildStdout>>,
    log_path: PathBuf,
}

fn log_tail(path: &Path) -> String {
    let text = std::fs::read_to_string(path).unwrap_or_default();
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(5)..].join(" | ")
}

impl Component {
    /// Starts `exe serve <kind> --config <config> --stats <stats> [extra..]`
    /// and waits for its `LISTENING` line. stderr goes to `log_path`.
    pub async fn launch(
        exe: &Path,
        kind: &str,
        config: &Path,
        stats_path: &Path,
        extra: &[&str],
        log_path: &Path,
    ) -> io::Result<Component> {
        let log = std::fs::File::create(log_path)?;
        let mut child = Command::new(exe)
            .arg("serve")
            .arg(kind)
            .arg("--config")
            .arg(config)
            .arg("--stats")
            .arg(stats_path)
            .args(extra)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::from(log))
            .kill_on_drop(true)
            .spawn()?;
        let pid = child.id().unwrap_or(0);
        let stdin = child.stdin.take();
        let stdout = BufReader::new(child.stdout.take().expect("piped")).lines();
        let mut c = Component {
            name: kind.to_string(),
            pid,
            addr: None,
            stats_path: stats_path.to_path_buf(),
            child,
            stdin,
            stdout,
            log_path: log_path.to_path_buf(),
        };
        let line = c.expect_line("LISTENING", STARTUP_TIMEOUT).await?;
        c.addr = line.parse().ok();
        Ok(c)
    }

    /// Waits for a stdout line starting with `prefix` and returns the rest.
    pub async fn expect_line(&mut self, prefix: &str, timeout: Duration) -> io::Result<String> {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let next = tokio::time::timeout_at(deadline, self.stdout.next_line()).await;
            match next {
                Err(_) => {
                    return Err(io::Error::new(
                        io::ErrorKind::TimedOut,
                        format!("{}: no {prefix} line within {timeout:?}", self.name),
                    ))
                }
                Ok(Ok(Some(line))) => {
                    if let Some(rest) = line.strip_prefix(prefix) {
                        return Ok(rest.trim().to_string());
                    }
                }
                Ok(Ok(None)) | Ok(Err(_)) => {
                    // give the process a moment to flush its log
                    tokio::time::sleep(Duration::from_millis(50)).await;
                    return Err(io::Error::other(format!(
                        "{} exited before {prefix}: {}",
                        self.name,
                        log_tail(&self.log_path)
                    )));
                }
            }
        }
    }

    pub async fn command(&mut self, line: &str) -> io::Result<()> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| io::Error::new(io::ErrorKind::BrokenPipe, "stdin closed"))?;
        stdin.write_all(format!("{line}\n").as_bytes()).await?;
        stdin.flush().await
    }

    /// Asks the process to stop and waits up to `timeout` before killing it.
    pub async fn stop(mut self, timeout: Duration) -> io::Result<()> {
        let _ = self.command("stop").await;
        drop(self.stdin.take());
        match tokio::time::timeout(timeout, self.child.wait()).await {
            Ok(status) => {
                let status = status?;
                if status.success() {
                    Ok(())
                } else {
                    Err(io::Error::other(format!("{} exited with {status}", self.name)))
                }
            }
            Err(_) => {
                self.child.kill().await?;
                Err(io::Error::new(io::ErrorKind::TimedOut, format!("{} killed after stop timeout", self.name)))
            }
        }
    }

    /// Waits for a process that is exiting on its own.
    pub async fn wait(mut self, timeout: Duration) -> io::Result<()> {
        drop(self.stdin.take());
        match tokio::time::timeout(timeout, self.child.wait()).await {
            Ok(s) => s.map(|_| ()),
            Err(_) => self.child.kill().await,
        }
    }

    /// SIGKILL, as a crash would.
    pub async fn kill(mut self) -> io::Result<()> {
        self.child.kill().await
    }
}
