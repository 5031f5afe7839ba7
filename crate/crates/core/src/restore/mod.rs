//! The error-driven restoration loop.
//!
//! Each iteration classifies the first halting error, applies one strategy,
//! and re-executes the notebook from its first cell in a fresh session.
//! Actions that move the first error to an earlier cell are rolled back.

mod strategies;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info};

use crate::classify::{
    extract_missing_module, extract_missing_path, extract_undefined_name, ErrorCategory, ErrorEvent, Restorability,
    TriageTable,
};
use crate::harness::{execute_notebook, ExecutionLimits, ExecutionReport, Executor, HarnessError, Provisioner, SandboxEnv};
use crate::llm::{LlmClient, LlmError};
use crate::notebook::{write_notebook, Notebook};

pub use strategies::{file_strategy, module_strategy, name_strategy, StrategyContext};

#[derive(Debug, Error)]
pub enum RestoreError {
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    InstallModule,
    LlmModuleName,
    SynthInputFile,
    CreateDirectory,
    InsertDefinition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionOutcome {
    Applied,
    StrategyFailed,
}

/// Everything an action created, so it can be undone.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifacts {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub files: Vec<PathBuf>,
    /// Directories created, outermost first.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dirs: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cells: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub packages: Vec<String>,
}

impl Artifacts {
    fn remove_from_disk(&self) {
        for f in self.files.iter().rev() {
            let _ = fs::remove_file(f);
        }
        for d in &self.dirs {
            let _ = fs::remove_dir_all(d);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReorderSuggestion {
    pub name: String,
    pub use_cell: usize,
    pub def_cell: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestorationAction {
    pub kind: ActionKind,
    pub target: String,
    pub artifacts: Artifacts,
    pub outcome: ActionOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reorder: Option<ReorderSuggestion>,
}

impl RestorationAction {
    fn new(kind: ActionKind, target: impl Into<String>) -> Self {
        RestorationAction {
            kind,
            target: target.into(),
            artifacts: Artifacts::default(),
            outcome: ActionOutcome::Applied,
            detail: None,
            prompt_fingerprint: None,
            reorder: None,
        }
    }

    fn failed(mut self, detail: impl Into<String>) -> Self {
        self.outcome = ActionOutcome::StrategyFailed;
        self.detail = Some(detail.into());
        self
    }
}

/// Timing-free summary of an execution report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDigest {
    pub cells_ok: usize,
    pub total_code_cells: usize,
    pub ratio: f64,
    pub category: ErrorCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_error: Option<ErrorEvent>,
}

impl ReportDigest {
    pub fn of(report: &ExecutionReport, triage: &TriageTable) -> Self {
        ReportDigest {
            cells_ok: report.cells_ok,
            total_code_cells: report.total_code_cells,
            ratio: report.ratio,
            category: triage.classify(report.first_error.as_ref()),
            first_error: report.first_error.clone(),
        }
    }

    pub fn is_fully_executable(&self) -> bool {
        self.first_error.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepVerdict {
    /// The first error moved to a later cell or disappeared.
    Progress,
    /// Same cell, different error; kept.
    Shifted,
    /// Same cell, same error; rolled back.
    NoProgress,
    /// First error moved earlier; rolled back.
    Regression,
    /// The strategy could not produce a fix.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationStep {
    pub iteration: usize,
    pub pre: ReportDigest,
    pub action: RestorationAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post: Option<ReportDigest>,
    pub verdict: StepVerdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalStatus {
    FullyRestored,
    PartiallyRestored,
    UnrestorablePathological,
    NeedsInteraction,
    NonAnalyzable,
    BudgetExhausted,
    /// A restorable error remained and nothing improved.
    Unrestored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Executable,
    NotRestorable,
    IterationCap,
    NoProgress,
    Regression,
    StrategyFailed,
    Budget,
}

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationTrace {
    pub schema_version: u32,
    pub notebook: PathBuf,
    pub initial: ReportDigest,
    pub steps: Vec<RestorationStep>,
    #[serde(rename = "final")]
    pub final_report: ReportDigest,
    pub final_status: FinalStatus,
    pub stop_reason: StopReason,
    pub delta_ratio: f64,
    pub cells_gained: i64,
    pub iterations: usize,
    /// Cells were inserted; their semantics were only compile-checked.
    pub mutated: bool,
    pub semantically_verified: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reorder_suggestions: Vec<ReorderSuggestion>,
}

impl RestorationTrace {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("trace serializes");
        s.push('\n');
        s
    }

    /// Trace file name for a notebook: `name.restore.json`.
    pub fn file_name(nb_path: &Path) -> String {
        let stem = nb_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        format!("{stem}.restore.json")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RestorePolicy {
    pub max_iterations: usize,
    pub max_file_bytes: usize,
    pub file_allowlist: Vec<String>,
}

impl Default for RestorePolicy {
    fn default() -> Self {
        RestorePolicy {
            max_iterations: 10,
            max_file_bytes: 1 << 20,
            file_allowlist: ["csv", "tsv", "json", "txt", "yaml", "xml"].map(String::from).to_vec(),
        }
    }
}

/// Final notebook state alongside the trace.
#[derive(Debug, Clone)]
pub struct RestoreOutcome {
    pub trace: RestorationTrace,
    pub notebook: Notebook,
}

impl RestoreOutcome {
    /// Writes the trace into `trace_dir` and, when cells were inserted, the
    /// restored notebook next to the original.
    pub fn write(&self, trace_dir: &Path) -> std::io::Result<Vec<PathBuf>> {
        fs::create_dir_all(trace_dir)?;
        let trace_path = trace_dir.join(RestorationTrace::file_name(&self.notebook.path));
        fs::write(&trace_path, self.trace.to_json())?;
        let mut written = vec![trace_path];
        if self.trace.mutated {
            let out = self.notebook.restored_path();
            fs::write(&out, write_notebook(&self.notebook))?;
            written.push(out);
        }
        Ok(written)
    }
}

/// What an applied action changed beyond the notebook itself.
struct Checkpoint {
    notebook: Notebook,
    installed: usize,
}

pub struct Restorer<'a> {
    pub executor: &'a dyn Executor,
    pub provisioner: &'a dyn Provisioner,
    pub llm: &'a LlmClient,
    pub triage: &'a TriageTable,
    pub limits: ExecutionLimits,
    pub policy: RestorePolicy,
}

#[derive(Debug, Clone)]
pub struct StrategyResult {
    pub action: RestorationAction,
    /// Notebook with the action's cells inserted.
    pub notebook: Option<Notebook>,
    /// The LLM quota ran out while applying the strategy.
    pub budget: bool,
}

fn error_target(ev: &ErrorEvent, cat: &ErrorCategory) -> Option<String> {
    match cat {
        ErrorCategory::ModuleNotFound => extract_missing_module(ev).ok().map(|m| m.top_level),
        ErrorCategory::FileNotFound => extract_missing_path(ev).ok().map(|p| p.display()),
        ErrorCategory::NameError => extract_undefined_name(ev).ok(),
        _ => Some(format!("{}: {}", ev.ename, ev.evalue)),
    }
}

impl<'a> Restorer<'a> {
    fn run(&self, nb: &Notebook, env: &SandboxEnv) -> Result<ReportDigest, RestoreError> {
        let report = execute_notebook(nb, env, &self.limits, self.executor)?;
        Ok(ReportDigest::of(&report, self.triage))
    }

    fn rollback(&self, action: &RestorationAction, checkpoint: &Checkpoint, nb: &mut Notebook, env: &mut SandboxEnv) {
        action.artifacts.remove_from_disk();
        self.provisioner.rollback(env, checkpoint.installed);
        *nb = checkpoint.notebook.clone();
    }

    pub fn restore(&self, nb: &Notebook, env: &mut SandboxEnv) -> Result<RestoreOutcome, RestoreError> {
        let initial = self.run(nb, env)?;
        let mut current = nb.clone();
        let mut report = initial.clone();
        let mut steps = Vec::new();
        let mut iterations = 0;

        let stop = loop {
            if report.is_fully_executable() {
                break StopReason::Executable;
            }
            let verdict = self.triage.triage(&report.category);
            if verdict != Some(Restorability::Restorable) {
                break StopReason::NotRestorable;
            }
            if iterations >= self.policy.max_iterations {
                break StopReason::IterationCap;
            }
            iterations += 1;
            let ev = report.first_error.clone().expect("non-executable report has an error");
            let checkpoint = Checkpoint {
                notebook: current.clone(),
                installed: env.snapshot(),
            };
            let cx = StrategyContext {
                restorer: self,
                nb: &current,
            };
            let result = match report.category {
                ErrorCategory::ModuleNotFound => module_strategy(&cx, &ev, env)?,
                ErrorCategory::FileNotFound => file_strategy(&cx, &ev)?,
                ErrorCategory::NameError => name_strategy(&cx, &ev, env)?,
                _ => unreachable!("triage table marks {:?} restorable without a strategy", report.category),
            };
            let StrategyResult {
                action,
                notebook,
                budget,
            } = result;
            if action.outcome == ActionOutcome::StrategyFailed {
                self.rollback(&action, &checkpoint, &mut current, env);
                debug!(target = %action.target, detail = ?action.detail, "strategy failed");
                steps.push(RestorationStep {
                    iteration: iterations,
                    pre: report.clone(),
                    action,
                    post: None,
                    verdict: StepVerdict::Failed,
                });
                break if budget { StopReason::Budget } else { StopReason::StrategyFailed };
            }
            if let Some(changed) = notebook {
                current = changed;
            }
            let post = self.run(&current, env)?;
            let verdict = if post.is_fully_executable() || post.cells_ok > report.cells_ok {
                StepVerdict::Progress
            } else if post.cells_ok < report.cells_ok {
                StepVerdict::Regression
            } else {
                let pre_target = error_target(&ev, &report.category);
                let post_target = post.first_error.as_ref().and_then(|e| error_target(e, &post.category));
                if post.category == report.category && pre_target == post_target {
                    StepVerdict::NoProgress
                } else {
                    StepVerdict::Shifted
                }
            };
            info!(iteration = iterations, kind = ?action.kind, target = %action.target, ?verdict, "restoration step");
            let rejected = matches!(verdict, StepVerdict::Regression | StepVerdict::NoProgress);
            if rejected {
                self.rollback(&action, &checkpoint, &mut current, env);
            }
            steps.push(RestorationStep {
                iteration: iterations,
                pre: report.clone(),
                action,
                post: Some(post.clone()),
                verdict,
            });
            match verdict {
                StepVerdict::Regression => break StopReason::Regression,
                StepVerdict::NoProgress => break StopReason::NoProgress,
                _ => report = post,
            }
        };

        let cells_gained = report.cells_ok as i64 - initial.cells_ok as i64;
        let final_status = match stop {
            StopReason::Executable => FinalStatus::FullyRestored,
            _ if cells_gained > 0 => FinalStatus::PartiallyRestored,
            StopReason::NotRestorable => match self.triage.triage(&report.category) {
                Some(Restorability::NeedsInteraction) => FinalStatus::NeedsInteraction,
                Some(Restorability::NonAnalyzable) => FinalStatus::NonAnalyzable,
                _ => FinalStatus::UnrestorablePathological,
            },
            StopReason::Budget => FinalStatus::BudgetExhausted,
            _ => FinalStatus::Unrestored,
        };
        let mutated = current.cells.iter().any(|c| c.is_inserted());
        let reorder_suggestions = steps
            .iter()
            .filter(|s| matches!(s.verdict, StepVerdict::Progress | StepVerdict::Shifted))
            .filter_map(|s| s.action.reorder.clone())
            .collect();
        let trace = RestorationTrace {
            schema_version: TRACE_SCHEMA_VERSION,
            notebook: nb.path.clone(),
            delta_ratio: report.ratio - initial.ratio,
            cells_gained,
            initial,
            final_report: report,
            steps,
            final_status,
            stop_reason: stop,
            iterations,
            mutated,
            semantically_verified: !mutated,
            reorder_suggestions,
        };
        Ok(RestoreOutcome {
            trace,
            notebook: current,
        })
    }
}
