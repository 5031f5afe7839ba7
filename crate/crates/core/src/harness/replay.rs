use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::{CellRun, CellStatus, ExecutionReport, Executor, HarnessError, SandboxEnv, Session};
use crate::notebook::Notebook;

pub const TRACE_FILE_SUFFIX: &str = ".trace.json";

/// Environment state a recorded run depended on.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Requirements {
    /// Paths relative to the notebook directory that must exist.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub files: Vec<String>,
    /// Modules that must have been installed into the sandbox.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub modules: Vec<String>,
}

impl Requirements {
    fn weight(&self) -> usize {
        self.files.len() + self.modules.len()
    }

    fn satisfied(&self, env: &SandboxEnv, workdir: &Path) -> bool {
        self.files.iter().all(|f| workdir.join(f).exists()) && self.modules.iter().all(|m| env.has_module(m))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RecordedOutcome {
    Ok,
    Error {
        ename: String,
        #[serde(default)]
        evalue: String,
        #[serde(default)]
        traceback: Vec<String>,
    },
    /// The cell never finished; replays block until the deadline.
    Hang,
    Crash {
        #[serde(default)]
        detail: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordedCell {
    pub cell_index: usize,
    #[serde(flatten)]
    pub outcome: RecordedOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayRecord {
    /// Notebook path relative to the trace store; matched as a path suffix.
    pub notebook: PathBuf,
    pub content_hash: String,
    #[serde(default)]
    pub requires: Requirements,
    pub outcomes: Vec<RecordedCell>,
}

impl ReplayRecord {
    /// Captures a finished run so it can be replayed later.
    pub fn from_report(notebook: impl Into<PathBuf>, nb: &Notebook, requires: Requirements, report: &ExecutionReport) -> Self {
        let outcomes = report
            .outcomes
            .iter()
            .filter(|o| o.status != CellStatus::Skipped)
            .map(|o| RecordedCell {
                cell_index: o.cell_index,
                outcome: match o.status {
                    CellStatus::Ok => RecordedOutcome::Ok,
                    CellStatus::Timeout => RecordedOutcome::Hang,
                    _ => RecordedOutcome::Error {
                        ename: o.ename.clone().unwrap_or_default(),
                        evalue: o.evalue.clone().unwrap_or_default(),
                        traceback: o.traceback.clone().unwrap_or_default(),
                    },
                },
            })
            .collect();
        ReplayRecord {
            notebook: notebook.into(),
            content_hash: nb.content_hash(),
            requires,
            outcomes,
        }
    }
}

/// Answers cell runs from recorded traces. When several records match a
/// notebook, the one with the most satisfied requirements wins.
#[derive(Debug, Clone, Default)]
pub struct ReplayExecutor {
    records: Vec<ReplayRecord>,
}

impl ReplayExecutor {
    pub fn from_records(records: Vec<ReplayRecord>) -> Self {
        ReplayExecutor { records }
    }

    /// Loads every `*.trace.json` file below `dir`.
    pub fn load(dir: &Path) -> Result<Self, HarnessError> {
        let mut records = Vec::new();
        let mut files: Vec<PathBuf> = WalkDir::new(dir)
            .into_iter()
            .filter_map(Result::ok)
            .filter(|e| e.file_type().is_file() && e.file_name().to_string_lossy().ends_with(TRACE_FILE_SUFFIX))
            .map(|e| e.into_path())
            .collect();
        files.sort();
        for path in files {
            let text = fs::read_to_string(&path)?;
            let batch: Vec<ReplayRecord> = serde_json::from_str(&text).map_err(|e| HarnessError::BadTrace {
                path: path.clone(),
                detail: e.to_string(),
            })?;
            records.extend(batch);
        }
        Ok(ReplayExecutor { records })
    }

    pub fn records(&self) -> &[ReplayRecord] {
        &self.records
    }

    fn select(&self, nb: &Notebook, env: &SandboxEnv, workdir: &Path) -> Result<&ReplayRecord, HarnessError> {
        let hash = nb.content_hash();
        let miss = |detail: &str| HarnessError::ReplayMiss {
            notebook: nb.path.clone(),
            hash: hash.clone(),
            detail: detail.to_string(),
        };
        let mut candidates = self
            .records
            .iter()
            .filter(|r| r.content_hash == hash && nb.path.ends_with(&r.notebook))
            .peekable();
        if candidates.peek().is_none() {
            return Err(miss("no record for this notebook content"));
        }
        let mut best: Option<&ReplayRecord> = None;
        for r in candidates.filter(|r| r.requires.satisfied(env, workdir)) {
            if best.is_none_or(|b| r.requires.weight() > b.requires.weight()) {
                best = Some(r);
            }
        }
        best.ok_or_else(|| miss("no record whose requirements are met"))
    }
}

struct ReplaySession {
    outcomes: HashMap<usize, RecordedOutcome>,
    notebook: PathBuf,
    hash: String,
}

impl Session for ReplaySession {
    fn run_cell(&mut self, cell_index: usize, _source: &str, deadline: Instant) -> Result<CellRun, HarnessError> {
        let outcome = self.outcomes.get(&cell_index).ok_or_else(|| HarnessError::ReplayMiss {
            notebook: self.notebook.clone(),
            hash: self.hash.clone(),
            detail: format!("trace has no outcome for cell {cell_index}"),
        })?;
        Ok(match outcome {
            RecordedOutcome::Ok => CellRun::Ok,
            RecordedOutcome::Error {
                ename,
                evalue,
                traceback,
            } => CellRun::Error {
                ename: ename.clone(),
                evalue: evalue.clone(),
                traceback: traceback.clone(),
            },
            RecordedOutcome::Hang => {
                thread::sleep(deadline.saturating_duration_since(Instant::now()));
                CellRun::Timeout
            }
            RecordedOutcome::Crash { detail } => CellRun::Crashed(detail.clone()),
        })
    }

    fn close(&mut self) {}
}

impl Executor for ReplayExecutor {
    fn open(&self, nb: &Notebook, env: &SandboxEnv, workdir: &Path) -> Result<Box<dyn Session>, HarnessError> {
        let record = self.select(nb, env, workdir)?;
        Ok(Box::new(ReplaySession {
            outcomes: record
                .outcomes
                .iter()
                .map(|c| (c.cell_index, c.outcome.clone()))
                .collect(),
            notebook: nb.path.clone(),
            hash: record.content_hash.clone(),
        }))
    }
}
