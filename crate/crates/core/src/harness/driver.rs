//! Client side of the kernel-driver protocol: line-delimited JSON over the
//! driver process's standard streams.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::{debug, warn};
use wait_timeout::ChildExt;

use super::{CellRun, Executor, HarnessError, SandboxEnv, Session, TERMINATION_GRACE};
use crate::notebook::Notebook;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverEventKind {
    Ready,
    CellStart,
    CellOk,
    CellError,
    Fatal,
    Bye,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverEvent {
    #[serde(rename = "type")]
    pub kind: DriverEventKind,
    #[serde(default)]
    pub cell_index: Option<usize>,
    #[serde(default)]
    pub ename: Option<String>,
    #[serde(default)]
    pub evalue: Option<String>,
    #[serde(default)]
    pub traceback: Vec<String>,
    #[serde(default)]
    pub duration: Option<f64>,
    #[serde(default)]
    pub version: Option<String>,
}

/// Spawns `interpreter driver_script` per notebook run.
#[derive(Debug, Clone)]
pub struct DriverExecutor {
    pub driver_script: PathBuf,
    /// Overrides the sandbox interpreter when set.
    pub interpreter: Option<PathBuf>,
    pub startup_timeout: Duration,
}

impl DriverExecutor {
    pub fn new(driver_script: impl Into<PathBuf>) -> Self {
        DriverExecutor {
            driver_script: driver_script.into(),
            interpreter: None,
            startup_timeout: Duration::from_secs(30),
        }
    }

    pub fn with_interpreter(mut self, interpreter: impl Into<PathBuf>) -> Self {
        self.interpreter = Some(interpreter.into());
        self
    }
}

struct DriverSession {
    child: Child,
    stdin: Option<ChildStdin>,
    events: Receiver<DriverEvent>,
    alive: bool,
    closed: bool,
}

fn spawn_reader(stdout: impl std::io::Read + Send + 'static) -> Receiver<DriverEvent> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(stdout).lines() {
            let Ok(line) = line else { break };
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<DriverEvent>(&line) {
                Ok(ev) => {
                    if tx.send(ev).is_err() {
                        break;
                    }
                }
                Err(e) => debug!(line = %line, error = %e, "ignoring non-protocol output"),
            }
        }
    });
    rx
}

impl DriverSession {
    fn send(&mut self, request: &serde_json::Value) -> std::io::Result<()> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::BrokenPipe, "stdin closed"))?;
        let mut line = request.to_string();
        line.push('\n');
        stdin.write_all(line.as_bytes())?;
        stdin.flush()
    }

    fn kill(&mut self) {
        self.alive = false;
        self.stdin = None;
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Session for DriverSession {
    fn run_cell(&mut self, cell_index: usize, source: &str, deadline: Instant) -> Result<CellRun, HarnessError> {
        if !self.alive {
            return Ok(CellRun::Crashed("driver is no longer running".into()));
        }
        if self.send(&json!({"op": "run", "cell_index": cell_index, "source": source})).is_err() {
            self.kill();
            return Ok(CellRun::Crashed("driver closed its input".into()));
        }
        loop {
            let wait = deadline.saturating_duration_since(Instant::now());
            match self.events.recv_timeout(wait) {
                Ok(ev) => match ev.kind {
                    DriverEventKind::CellStart | DriverEventKind::Ready => continue,
                    DriverEventKind::Warning => {
                        warn!(cell_index, detail = ?ev.evalue, "driver warning");
                        continue;
                    }
                    DriverEventKind::CellOk => return Ok(CellRun::Ok),
                    DriverEventKind::CellError => {
                        let ename = ev.ename.filter(|e| !e.is_empty()).ok_or_else(|| {
                            HarnessError::Protocol(format!("cell_error for cell {cell_index} without ename"))
                        })?;
                        return Ok(CellRun::Error {
                            ename,
                            evalue: ev.evalue.unwrap_or_default(),
                            traceback: ev.traceback,
                        });
                    }
                    DriverEventKind::Fatal => {
                        self.kill();
                        return Ok(CellRun::Crashed(ev.evalue.unwrap_or_else(|| "fatal driver error".into())));
                    }
                    DriverEventKind::Bye => {
                        self.kill();
                        return Ok(CellRun::Crashed("driver exited mid-cell".into()));
                    }
                },
                Err(RecvTimeoutError::Timeout) => {
                    self.kill();
                    return Ok(CellRun::Timeout);
                }
                Err(RecvTimeoutError::Disconnected) => {
                    let status = self.child.wait().ok().and_then(|s| s.code());
                    self.alive = false;
                    self.stdin = None;
                    return Ok(CellRun::Crashed(match status {
                        Some(code) => format!("driver exited with status {code} without closing"),
                        None => "driver terminated by signal".into(),
                    }));
                }
            }
        }
    }

    fn close(&mut self) {
        if self.closed {
            return;
        }
        self.closed = true;
        if self.alive && self.send(&json!({"op": "close"})).is_ok() {
            let until = Instant::now() + TERMINATION_GRACE;
            while let Ok(ev) = self.events.recv_timeout(until.saturating_duration_since(Instant::now())) {
                if ev.kind == DriverEventKind::Bye {
                    break;
                }
            }
        }
        self.stdin = None;
        match self.child.wait_timeout(TERMINATION_GRACE) {
            Ok(Some(_)) => {}
            _ => {
                let _ = self.child.kill();
                let _ = self.child.wait();
            }
        }
        self.alive = false;
    }
}

impl Drop for DriverSession {
    fn drop(&mut self) {
        self.close();
    }
}

impl Executor for DriverExecutor {
    fn open(&self, _nb: &Notebook, env: &SandboxEnv, workdir: &Path) -> Result<Box<dyn Session>, HarnessError> {
        let interpreter = self.interpreter.as_ref().unwrap_or(&env.interpreter);
        let script = std::fs::canonicalize(&self.driver_script).map_err(HarnessError::Spawn)?;
        let mut child = Command::new(interpreter)
            .arg(&script)
            .current_dir(workdir)
            .env("PYTHONUNBUFFERED", "1")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(HarnessError::Spawn)?;
        let stdout = child.stdout.take().expect("stdout is piped");
        let stdin = child.stdin.take();
        let mut session = DriverSession {
            child,
            stdin,
            events: spawn_reader(stdout),
            alive: true,
            closed: false,
        };
        match session.events.recv_timeout(self.startup_timeout) {
            Ok(ev) if ev.kind == DriverEventKind::Ready => {
                debug!(version = ?ev.version, "driver ready");
                Ok(Box::new(session))
            }
            Ok(ev) => {
                session.kill();
                Err(HarnessError::Protocol(format!(
                    "expected ready, got {:?}: {}",
                    ev.kind,
                    ev.evalue.unwrap_or_default()
                )))
            }
            Err(_) => {
                session.kill();
                Err(HarnessError::Protocol("driver did not report ready".into()))
            }
        }
    }
}
