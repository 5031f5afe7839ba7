//! Per-repository sandboxes and cell-by-cell notebook execution.
//!
//! Execution goes through the [`Executor`] trait. Two implementations ship
//! here: [`ReplayExecutor`] answers from recorded outcome traces and
//! [`DriverExecutor`] talks to an out-of-process kernel driver.

mod driver;
mod replay;
mod requirements;
mod sandbox;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyzer::{self, CompileErrorKind};
use crate::classify::{ErrorEvent, ErrorPhase, CRASH_ENAME, TIMEOUT_ENAME};
use crate::notebook::{code_cells, Notebook};

pub use driver::{DriverEvent, DriverExecutor};
pub use replay::{RecordedOutcome, ReplayExecutor, ReplayRecord, Requirements, TRACE_FILE_SUFFIX};
pub use requirements::{discover_requirements, parse_manifest, ManifestKind, RequirementSource};
pub use sandbox::{
    prepare_sandbox, IndexPackage, IndexProvisioner, InstallOutcome, InstallRecord, Provisioner,
    SandboxEnv, VenvProvisioner,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot create environment at {root}: {detail}")]
    EnvCreationFailed { root: PathBuf, detail: String },
    #[error("no recorded trace for {notebook} (hash {hash}): {detail}")]
    ReplayMiss {
        notebook: PathBuf,
        hash: String,
        detail: String,
    },
    #[error("invalid replay trace {path}: {detail}")]
    BadTrace { path: PathBuf, detail: String },
    #[error("failed to start executor: {0}")]
    Spawn(#[source] std::io::Error),
    #[error("executor protocol violation: {0}")]
    Protocol(String),
    #[error("notebook has no code cells")]
    EmptyNotebook,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdinPolicy {
    #[default]
    Deny,
}

pub const DEFAULT_NOTEBOOK_TIMEOUT: Duration = Duration::from_secs(300);

/// Time allowed for an executor to wind down after its deadline passes.
pub const TERMINATION_GRACE: Duration = Duration::from_secs(2);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecutionLimits {
    #[serde(with = "humantime_serde")]
    pub notebook_timeout: Duration,
    #[serde(default, with = "humantime_serde")]
    pub per_cell_timeout: Option<Duration>,
    #[serde(default)]
    pub stdin_policy: StdinPolicy,
}

impl Default for ExecutionLimits {
    fn default() -> Self {
        ExecutionLimits {
            notebook_timeout: DEFAULT_NOTEBOOK_TIMEOUT,
            per_cell_timeout: None,
            stdin_policy: StdinPolicy::Deny,
        }
    }
}

impl ExecutionLimits {
    pub fn with_timeout(notebook_timeout: Duration) -> Self {
        assert!(!notebook_timeout.is_zero(), "notebook timeout must be positive");
        ExecutionLimits {
            notebook_timeout,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Error,
    Skipped,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub cell_index: usize,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ename: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evalue: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traceback: Option<Vec<String>>,
    pub duration: f64,
    /// Cell was added by restoration; excluded from executability counts.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub inserted: bool,
}

impl CellOutcome {
    fn plain(cell_index: usize, status: CellStatus, inserted: bool, duration: Duration) -> Self {
        CellOutcome {
            cell_index,
            status,
            ename: None,
            evalue: None,
            traceback: None,
            duration: duration.as_secs_f64(),
            inserted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub outcomes: Vec<CellOutcome>,
    pub first_error: Option<ErrorEvent>,
    pub cells_ok: usize,
    pub total_code_cells: usize,
    pub ratio: f64,
    pub wall_time: f64,
}

impl ExecutionReport {
    fn from_outcomes(outcomes: Vec<CellOutcome>, first_error: Option<ErrorEvent>, wall: Duration) -> Self {
        let total_code_cells = outcomes.iter().filter(|o| !o.inserted).count();
        let cells_ok = outcomes
            .iter()
            .take_while(|o| o.status == CellStatus::Ok)
            .filter(|o| !o.inserted)
            .count();
        let ratio = if total_code_cells == 0 {
            0.0
        } else {
            cells_ok as f64 / total_code_cells as f64
        };
        ExecutionReport {
            outcomes,
            first_error,
            cells_ok,
            total_code_cells,
            ratio,
            wall_time: wall.as_secs_f64(),
        }
    }

    pub fn is_fully_executable(&self) -> bool {
        self.first_error.is_none() && self.cells_ok == self.total_code_cells
    }

    /// Original (non-inserted) cells preceding the first error's cell.
    pub fn error_position(&self) -> Option<usize> {
        self.first_error.as_ref().map(|_| self.cells_ok)
    }
}

pub fn partial_executability(report: &ExecutionReport) -> Result<f64, HarnessError> {
    if report.total_code_cells == 0 {
        return Err(HarnessError::EmptyNotebook);
    }
    Ok(report.cells_ok as f64 / report.total_code_cells as f64)
}

/// Result of running one cell through a [`Session`].
#[derive(Debug, Clone, PartialEq)]
pub enum CellRun {
    Ok,
    Error {
        ename: String,
        evalue: String,
        traceback: Vec<String>,
    },
    Timeout,
    Crashed(String),
}

pub trait Session {
    fn run_cell(&mut self, cell_index: usize, source: &str, deadline: Instant) -> Result<CellRun, HarnessError>;
    fn close(&mut self);
}

pub trait Executor: Send + Sync {
    /// Starts a fresh interpreter session whose working directory is `workdir`.
    fn open(&self, nb: &Notebook, env: &SandboxEnv, workdir: &Path) -> Result<Box<dyn Session>, HarnessError>;
}

pub fn execute_notebook(
    nb: &Notebook,
    env: &SandboxEnv,
    limits: &ExecutionLimits,
    executor: &dyn Executor,
) -> Result<ExecutionReport, HarnessError> {
    run_until(nb, env, limits, executor, None)
}

fn run_until(
    nb: &Notebook,
    env: &SandboxEnv,
    limits: &ExecutionLimits,
    executor: &dyn Executor,
    static_error: Option<ErrorEvent>,
) -> Result<ExecutionReport, HarnessError> {
    let start = Instant::now();
    let deadline = start + limits.notebook_timeout;
    let mut session = executor.open(nb, env, &nb.workdir())?;
    let mut outcomes = Vec::new();
    let mut first_error: Option<ErrorEvent> = None;

    for cell in code_cells(nb) {
        let inserted = cell.is_inserted();
        if first_error.is_some() {
            outcomes.push(CellOutcome::plain(cell.index, CellStatus::Skipped, inserted, Duration::ZERO));
            continue;
        }
        if let Some(ev) = static_error.as_ref().filter(|e| e.cell_index == cell.index) {
            let mut o = CellOutcome::plain(cell.index, CellStatus::Error, inserted, Duration::ZERO);
            o.ename = Some(ev.ename.clone());
            o.evalue = Some(ev.evalue.clone());
            o.traceback = Some(ev.traceback.clone());
            outcomes.push(o);
            first_error = Some(ev.clone());
            continue;
        }
        let cell_start = Instant::now();
        let cell_deadline = match limits.per_cell_timeout {
            Some(d) => deadline.min(cell_start + d),
            None => deadline,
        };
        let run = if cell_start >= deadline {
            CellRun::Timeout
        } else {
            match session.run_cell(cell.index, &cell.source, cell_deadline) {
                Ok(r) => r,
                Err(e) => {
                    session.close();
                    return Err(e);
                }
            }
        };
        let elapsed = cell_start.elapsed();
        match run {
            CellRun::Ok => outcomes.push(CellOutcome::plain(cell.index, CellStatus::Ok, inserted, elapsed)),
            CellRun::Error {
                ename,
                evalue,
                traceback,
            } => {
                first_error = Some(ErrorEvent {
                    cell_index: cell.index,
                    ename: ename.clone(),
                    evalue: evalue.clone(),
                    traceback: traceback.clone(),
                    phase: ErrorPhase::Dynamic,
                });
                let mut o = CellOutcome::plain(cell.index, CellStatus::Error, inserted, elapsed);
                o.ename = Some(ename);
                o.evalue = Some(evalue);
                o.traceback = Some(traceback);
                outcomes.push(o);
            }
            CellRun::Timeout => {
                let limit = match limits.per_cell_timeout {
                    Some(d) if cell_deadline < deadline => format!("cell exceeded {}", humantime::format_duration(d)),
                    _ => format!(
                        "notebook exceeded {}",
                        humantime::format_duration(limits.notebook_timeout)
                    ),
                };
                first_error = Some(ErrorEvent::dynamic(cell.index, TIMEOUT_ENAME, limit));
                outcomes.push(CellOutcome::plain(cell.index, CellStatus::Timeout, inserted, elapsed));
            }
            CellRun::Crashed(detail) => {
                first_error = Some(ErrorEvent::dynamic(cell.index, CRASH_ENAME, detail.clone()));
                let mut o = CellOutcome::plain(cell.index, CellStatus::Error, inserted, elapsed);
                o.ename = Some(CRASH_ENAME.into());
                o.evalue = Some(detail);
                o.traceback = Some(Vec::new());
                outcomes.push(o);
            }
        }
    }
    session.close();
    Ok(ExecutionReport::from_outcomes(outcomes, first_error, start.elapsed()))
}

/// Static check followed by dynamic execution of the cells before the first
/// compile error. A compile error becomes the first error unless an earlier
/// cell fails at run time.
pub fn assess_notebook(
    nb: &Notebook,
    env: &SandboxEnv,
    limits: &ExecutionLimits,
    executor: &dyn Executor,
) -> Result<ExecutionReport, HarnessError> {
    let compiled = analyzer::check_compilable(nb);
    let static_error = if compiled.ok {
        None
    } else {
        let (cell, line, column) = compiled.location.map_or((0, 0, 0), |l| (l.cell, l.line, l.column));
        let kind = compiled.error_kind.unwrap_or(CompileErrorKind::Syntax);
        Some(ErrorEvent {
            cell_index: cell,
            ename: kind.ename().to_string(),
            evalue: compiled.message.clone().unwrap_or_default(),
            traceback: vec![format!("line {line}, column {column}")],
            phase: ErrorPhase::Static,
        })
    };
    run_until(nb, env, limits, executor, static_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::notebook::CellKind;

    /// Runs cells from a fixed script: `None` for success, or an error name.
    struct Scripted(Vec<Option<&'static str>>);
    struct ScriptedSession(Vec<Option<&'static str>>);

    impl Executor for Scripted {
        fn open(&self, _: &Notebook, _: &SandboxEnv, _: &Path) -> Result<Box<dyn Session>, HarnessError> {
            Ok(Box::new(ScriptedSession(self.0.clone())))
        }
    }

    impl Session for ScriptedSession {
        fn run_cell(&mut self, i: usize, _: &str, _: Instant) -> Result<CellRun, HarnessError> {
            Ok(match self.0[i] {
                None => CellRun::Ok,
                Some("hang") => CellRun::Timeout,
                Some(e) => CellRun::Error {
                    ename: e.into(),
                    evalue: String::new(),
                    traceback: vec![],
                },
            })
        }
        fn close(&mut self) {}
    }

    fn nb(n: usize) -> Notebook {
        let cells: Vec<(CellKind, &str)> = (0..n).map(|_| (CellKind::Code, "pass")).collect();
        Notebook::from_cells("t.ipynb", &cells)
    }

    #[test]
    fn ten_of_thirteen() {
        let mut script = vec![None; 13];
        script[10] = Some("ValueError");
        let r = execute_notebook(&nb(13), &SandboxEnv::detached(), &ExecutionLimits::default(), &Scripted(script))
            .unwrap();
        assert_eq!(r.cells_ok, 10);
        assert!((partial_executability(&r).unwrap() - 10.0 / 13.0).abs() < 1e-12);
        assert!(r.outcomes[11..].iter().all(|o| o.status == CellStatus::Skipped));
        assert_eq!(r.first_error.unwrap().cell_index, 10);
    }

    #[test]
    fn first_cell_error_is_zero() {
        let r = execute_notebook(
            &nb(3),
            &SandboxEnv::detached(),
            &ExecutionLimits::default(),
            &Scripted(vec![Some("SyntaxError"), None, None]),
        )
        .unwrap();
        assert_eq!(partial_executability(&r).unwrap(), 0.0);
    }

    #[test]
    fn clean_run_is_full() {
        let r = execute_notebook(&nb(4), &SandboxEnv::detached(), &ExecutionLimits::default(), &Scripted(vec![None; 4]))
            .unwrap();
        assert!(r.is_fully_executable());
        assert_eq!(r.ratio, 1.0);
    }

    #[test]
    fn timeout_synthesizes_sentinel() {
        let r = execute_notebook(
            &nb(2),
            &SandboxEnv::detached(),
            &ExecutionLimits::default(),
            &Scripted(vec![None, Some("hang")]),
        )
        .unwrap();
        assert_eq!(r.first_error.as_ref().unwrap().ename, TIMEOUT_ENAME);
        assert_eq!(r.outcomes[1].status, CellStatus::Timeout);
        assert!(r.outcomes[1].ename.is_none());
    }

    #[test]
    fn empty_report_is_rejected() {
        let r = ExecutionReport::from_outcomes(vec![], None, Duration::ZERO);
        assert!(matches!(partial_executability(&r), Err(HarnessError::EmptyNotebook)));
    }

    #[test]
    fn compile_error_stops_before_running_the_cell() {
        let nb = Notebook::from_cells("t.ipynb", &[(CellKind::Code, "x = 1"), (CellKind::Code, "def f(:")]);
        let r = assess_notebook(&nb, &SandboxEnv::detached(), &ExecutionLimits::default(), &Scripted(vec![None, None]))
            .unwrap();
        let ev = r.first_error.unwrap();
        assert_eq!(ev.phase, ErrorPhase::Static);
        assert_eq!(ev.cell_index, 1);
        assert_eq!(r.cells_ok, 1);
    }

    #[test]
    fn limits_parse_human_durations() {
        let l: ExecutionLimits = toml::from_str("notebook_timeout = \"5m\"\nper_cell_timeout = \"30s\"").unwrap();
        assert_eq!(l.notebook_timeout, Duration::from_secs(300));
        assert_eq!(l.per_cell_timeout, Some(Duration::from_secs(30)));
    }
}
