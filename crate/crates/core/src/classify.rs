//! Error taxonomy, triage, and payload extraction from error messages.

use std::fmt;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Exception name synthesized by the harness when a run exceeds its time limit.
pub const TIMEOUT_ENAME: &str = "ExecutionTimeout";
/// Exception name synthesized when the executor dies mid-run.
pub const CRASH_ENAME: &str = "ExecutorCrash";

const DEFAULT_TRIAGE_TABLE: &str = include_str!("../data/triage.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorPhase {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorEvent {
    pub cell_index: usize,
    pub ename: String,
    pub evalue: String,
    #[serde(default)]
    pub traceback: Vec<String>,
    pub phase: ErrorPhase,
}

impl ErrorEvent {
    pub fn dynamic(cell_index: usize, ename: impl Into<String>, evalue: impl Into<String>) -> Self {
        ErrorEvent {
            cell_index,
            ename: ename.into(),
            evalue: evalue.into(),
            traceback: Vec::new(),
            phase: ErrorPhase::Dynamic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ErrorCategory {
    Executable,
    FileNotFound,
    ModuleNotFound,
    NameError,
    StdinNotImplemented,
    Timeout,
    ImportError,
    Attribute,
    Value,
    Type,
    Key,
    Index,
    Syntax,
    Other(String),
}

impl ErrorCategory {
    /// Label used in tables; `Other` categories show the raw exception name.
    pub fn label(&self) -> String {
        match self {
            ErrorCategory::Other(e) => e.clone(),
            c => c.to_string(),
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorCategory::Executable => "Executable",
            ErrorCategory::FileNotFound => "FileNotFound",
            ErrorCategory::ModuleNotFound => "ModuleNotFound",
            ErrorCategory::NameError => "NameError",
            ErrorCategory::StdinNotImplemented => "StdinNotImplemented",
            ErrorCategory::Timeout => "Timeout",
            ErrorCategory::ImportError => "ImportError",
            ErrorCategory::Attribute => "Attribute",
            ErrorCategory::Value => "Value",
            ErrorCategory::Type => "Type",
            ErrorCategory::Key => "Key",
            ErrorCategory::Index => "Index",
            ErrorCategory::Syntax => "Syntax",
            ErrorCategory::Other(e) => return write!(f, "Other({e})"),
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown error category {0:?}")]
pub struct UnknownCategory(String);

impl FromStr for ErrorCategory {
    type Err = UnknownCategory;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "Executable" => ErrorCategory::Executable,
            "FileNotFound" => ErrorCategory::FileNotFound,
            "ModuleNotFound" => ErrorCategory::ModuleNotFound,
            "NameError" => ErrorCategory::NameError,
            "StdinNotImplemented" => ErrorCategory::StdinNotImplemented,
            "Timeout" => ErrorCategory::Timeout,
            "ImportError" => ErrorCategory::ImportError,
            "Attribute" => ErrorCategory::Attribute,
            "Value" => ErrorCategory::Value,
            "Type" => ErrorCategory::Type,
            "Key" => ErrorCategory::Key,
            "Index" => ErrorCategory::Index,
            "Syntax" => ErrorCategory::Syntax,
            "Other" => ErrorCategory::Other(String::new()),
            other => match other.strip_prefix("Other(").and_then(|r| r.strip_suffix(')')) {
                Some(e) => ErrorCategory::Other(e.to_string()),
                None => return Err(UnknownCategory(other.to_string())),
            },
        })
    }
}

impl Serialize for ErrorCategory {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ErrorCategory {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Restorability {
    Restorable,
    Pathological,
    NeedsInteraction,
    NonAnalyzable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriageRule {
    pub ename: String,
    pub category: String,
    pub restorability: Restorability,
}

#[derive(Debug, Error)]
pub enum TriageTableError {
    #[error("invalid triage table: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("rule {index}: {source}")]
    Category {
        index: usize,
        source: UnknownCategory,
    },
    #[error("triage table has no catch-all rule")]
    NoCatchAll,
    #[error("reading triage table: {0}")]
    Io(#[from] std::io::Error),
}

/// First-match-wins mapping from exception names to category and verdict.
#[derive(Debug, Clone)]
pub struct TriageTable {
    rules: Vec<(Regex, ErrorCategory, Restorability)>,
}

#[derive(Deserialize)]
struct TriageFile {
    rule: Vec<TriageRule>,
}

fn glob_regex(pattern: &str) -> Regex {
    let escaped: Vec<String> = pattern.split('*').map(regex::escape).collect();
    Regex::new(&format!("^{}$", escaped.join(".*"))).expect("escaped glob is a valid regex")
}

impl TriageTable {
    pub fn from_toml(text: &str) -> Result<Self, TriageTableError> {
        let file: TriageFile = toml::from_str(text)?;
        let mut rules = Vec::with_capacity(file.rule.len());
        for (index, r) in file.rule.into_iter().enumerate() {
            let category = r
                .category
                .parse()
                .map_err(|source| TriageTableError::Category { index, source })?;
            rules.push((glob_regex(&r.ename), category, r.restorability));
        }
        if !rules.iter().any(|(re, _, _)| re.as_str() == "^.*$") {
            return Err(TriageTableError::NoCatchAll);
        }
        Ok(TriageTable { rules })
    }

    pub fn load(path: &Path) -> Result<Self, TriageTableError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// The checked-in table.
    pub fn builtin() -> &'static TriageTable {
        static TABLE: OnceLock<TriageTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            TriageTable::from_toml(DEFAULT_TRIAGE_TABLE).expect("bundled triage table is valid")
        })
    }

    /// Category of the first halting error; `None` means the run completed.
    pub fn classify(&self, ev: Option<&ErrorEvent>) -> ErrorCategory {
        let Some(ev) = ev else {
            return ErrorCategory::Executable;
        };
        if ev.phase == ErrorPhase::Static {
            return ErrorCategory::Syntax;
        }
        for (re, cat, _) in &self.rules {
            if re.is_match(&ev.ename) {
                return match cat {
                    ErrorCategory::Other(_) => ErrorCategory::Other(ev.ename.clone()),
                    c => c.clone(),
                };
            }
        }
        ErrorCategory::Other(ev.ename.clone())
    }

    /// Verdict for a category; `None` for executable notebooks.
    pub fn triage(&self, cat: &ErrorCategory) -> Option<Restorability> {
        if *cat == ErrorCategory::Executable {
            return None;
        }
        let found = self.rules.iter().find(|(_, c, _)| match (c, cat) {
            (ErrorCategory::Other(_), ErrorCategory::Other(_)) => true,
            (a, b) => a == b,
        });
        Some(found.map_or(Restorability::Pathological, |(_, _, r)| *r))
    }
}

pub fn classify(ev: Option<&ErrorEvent>) -> ErrorCategory {
    TriageTable::builtin().classify(ev)
}

pub fn triage(cat: &ErrorCategory) -> Option<Restorability> {
    TriageTable::builtin().triage(cat)
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("cannot extract {what} from error message {message:?}")]
pub struct UnparseableMessage {
    pub what: &'static str,
    pub message: String,
}

fn unparseable(what: &'static str, ev: &ErrorEvent) -> UnparseableMessage {
    UnparseableMessage {
        what,
        message: ev.evalue.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingModule {
    /// Dotted name as quoted in the message.
    pub full: String,
    /// First dotted component; what `pip install` is tried with.
    pub top_level: String,
}

pub fn extract_missing_module(ev: &ErrorEvent) -> Result<MissingModule, UnparseableMessage> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r#"No module named ['"]?([A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)*)"#)
            .expect("valid regex")
    });
    let caps = re
        .captures(&ev.evalue)
        .ok_or_else(|| unparseable("module name", ev))?;
    let full = caps[1].to_string();
    let top_level = full.split('.').next().unwrap_or_default().to_string();
    Ok(MissingModule { full, top_level })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessMode {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingPath {
    /// For reads the missing file; for writes the directory that must exist.
    pub path: PathBuf,
    pub mode: AccessMode,
    pub is_dir: bool,
}

impl MissingPath {
    /// Lower-cased extension, if any.
    pub fn extension(&self) -> Option<String> {
        self.path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
    }

    pub fn display(&self) -> String {
        let mut s = self.path.to_string_lossy().into_owned();
        if self.is_dir && !s.ends_with('/') {
            s.push('/');
        }
        s
    }
}

/// Lexical cleanup: drops `.` components and resolves `..` where possible.
pub fn normalize_relative(path: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in path.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

fn write_call_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r#"(?x)
            open\([^)]*,\s*(?:mode\s*=\s*)?['"][^'"]*[wax]
            | \.to_(?:csv|json|excel|parquet|pickle|feather|html|hdf)\(
            | savefig\( | \.save\( | \.write\( | \.dump\( | mkdir\( | makedirs\(
            | imwrite\( | np\.save | torch\.save
            "#,
        )
        .expect("valid regex")
    })
}

pub fn extract_missing_path(ev: &ErrorEvent) -> Result<MissingPath, UnparseableMessage> {
    static QUOTED: OnceLock<Regex> = OnceLock::new();
    static PANDAS: OnceLock<Regex> = OnceLock::new();
    let quoted = QUOTED.get_or_init(|| {
        Regex::new(r#"No such file or directory:\s*(?:b)?['"]([^'"]+)['"]"#).expect("valid regex")
    });
    let pandas = PANDAS.get_or_init(|| {
        Regex::new(r#"^(?:\[Errno \d+\] )?File (?:b)?['"]?([^'"]+?)['"]? does not exist"#)
            .expect("valid regex")
    });
    let raw = quoted
        .captures(&ev.evalue)
        .or_else(|| pandas.captures(&ev.evalue))
        .map(|c| c[1].to_string())
        .ok_or_else(|| unparseable("file path", ev))?;

    let trace = ev.traceback.join("\n");
    let mode = if write_call_pattern().is_match(&trace) {
        AccessMode::Write
    } else {
        AccessMode::Read
    };
    let raw_path = PathBuf::from(&raw);
    let path = if raw_path.is_absolute() {
        raw_path
    } else {
        normalize_relative(&raw_path)
    };
    match mode {
        AccessMode::Read => Ok(MissingPath {
            path,
            mode,
            is_dir: raw.ends_with('/'),
        }),
        AccessMode::Write => {
            let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
            if dir.as_os_str().is_empty() {
                return Err(unparseable("missing directory", ev));
            }
            Ok(MissingPath {
                path: dir,
                mode,
                is_dir: true,
            })
        }
    }
}

pub fn extract_undefined_name(ev: &ErrorEvent) -> Result<String, UnparseableMessage> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"name '([A-Za-z_][A-Za-z0-9_]*)' is not defined").expect("valid regex")
    });
    re.captures(&ev.evalue)
        .map(|c| c[1].to_string())
        .ok_or_else(|| unparseable("undefined name", ev))
}
