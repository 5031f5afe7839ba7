//! Notebook documents: parsing, screening, editing and serialization.
//!
//! Only the nbformat 4.x JSON schema is accepted. Every key the model does
//! not interpret is carried through untouched so that `write_notebook`
//! reproduces the document apart from deliberate edits.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Metadata namespace used to tag cells created by restoration.
pub const METADATA_NAMESPACE: &str = "nbrestore";

#[derive(Debug, Error)]
pub enum NotebookError {
    #[error("corrupted notebook {path}: {detail}")]
    Corrupted { path: PathBuf, detail: String },
    #[error("cell index {at} out of range for notebook with {len} cells")]
    IndexOutOfRange { at: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Code,
    Markdown,
    Raw,
}

impl CellKind {
    fn from_str(s: &str) -> Option<Self> {
        match s {
            "code" => Some(CellKind::Code),
            "markdown" => Some(CellKind::Markdown),
            "raw" => Some(CellKind::Raw),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            CellKind::Code => "code",
            CellKind::Markdown => "markdown",
            CellKind::Raw => "raw",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub kind: CellKind,
    pub source: String,
    pub recorded_exec_count: Option<i64>,
    /// Keys other than `cell_type`, `source` and `execution_count`.
    extra: Map<String, Value>,
    source_as_lines: bool,
}

impl Cell {
    pub fn code(index: usize, source: impl Into<String>) -> Self {
        let mut extra = Map::new();
        extra.insert("metadata".into(), Value::Object(Map::new()));
        extra.insert("outputs".into(), Value::Array(Vec::new()));
        Cell {
            index,
            kind: CellKind::Code,
            source: source.into(),
            recorded_exec_count: None,
            extra,
            source_as_lines: true,
        }
    }

    pub fn markdown(index: usize, source: impl Into<String>) -> Self {
        let mut extra = Map::new();
        extra.insert("metadata".into(), Value::Object(Map::new()));
        Cell {
            index,
            kind: CellKind::Markdown,
            source: source.into(),
            recorded_exec_count: None,
            extra,
            source_as_lines: true,
        }
    }

    pub fn is_code(&self) -> bool {
        self.kind == CellKind::Code
    }

    /// True for cells added by the restoration engine rather than the author.
    pub fn is_inserted(&self) -> bool {
        self.extra
            .get("metadata")
            .and_then(|m| m.get(METADATA_NAMESPACE))
            .and_then(|m| m.get("inserted"))
            .and_then(Value::as_bool)
            .unwrap_or(false)
    }

    fn mark_inserted(&mut self) {
        let meta = self
            .extra
            .entry("metadata")
            .or_insert_with(|| Value::Object(Map::new()));
        if !meta.is_object() {
            *meta = Value::Object(Map::new());
        }
        let ns = meta
            .as_object_mut()
            .expect("metadata is an object")
            .entry(METADATA_NAMESPACE)
            .or_insert_with(|| Value::Object(Map::new()));
        if let Some(obj) = ns.as_object_mut() {
            obj.insert("inserted".into(), Value::Bool(true));
            obj.insert("semantically_verified".into(), Value::Bool(false));
        }
    }

    /// True when the source holds nothing but whitespace and comments.
    pub fn is_blank(&self) -> bool {
        self.source.lines().all(|l| {
            let t = l.trim();
            t.is_empty() || t.starts_with('#')
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelLanguage {
    pub name: String,
    pub major: Option<u32>,
}

impl KernelLanguage {
    pub fn python3() -> Self {
        KernelLanguage {
            name: "python".into(),
            major: Some(3),
        }
    }

    pub fn is_python3(&self) -> bool {
        self.name == "python" && self.major.unwrap_or(3) == 3
    }
}

impl std::fmt::Display for KernelLanguage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.major {
            Some(m) => write!(f, "{}{}", self.name, m),
            None => write!(f, "{}", self.name),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Notebook {
    pub path: PathBuf,
    /// `(nbformat, nbformat_minor)`
    pub format_version: (u64, u64),
    pub kernel_language: KernelLanguage,
    pub cells: Vec<Cell>,
    pub repo: Option<String>,
    /// Top-level document with the `cells` key removed.
    document: Map<String, Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScreeningStatus {
    Ok,
    Corrupted,
    NoCode,
    NonPython3,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreeningVerdict {
    pub status: ScreeningStatus,
    pub detail: String,
}

impl ScreeningVerdict {
    pub fn corrupted(err: &NotebookError) -> Self {
        ScreeningVerdict {
            status: ScreeningStatus::Corrupted,
            detail: err.to_string(),
        }
    }
}

fn corrupted(path: &Path, detail: impl Into<String>) -> NotebookError {
    NotebookError::Corrupted {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn join_source(value: &Value) -> Option<(String, bool)> {
    match value {
        Value::String(s) => Some((s.clone(), false)),
        Value::Array(parts) => {
            let mut out = String::new();
            for p in parts {
                out.push_str(p.as_str()?);
            }
            Some((out, true))
        }
        Value::Null => Some((String::new(), true)),
        _ => None,
    }
}

fn split_source_lines(source: &str) -> Value {
    Value::Array(
        source
            .split_inclusive('\n')
            .map(|l| Value::String(l.to_string()))
            .collect(),
    )
}

fn detect_kernel_language(metadata: Option<&Value>) -> KernelLanguage {
    let Some(meta) = metadata else {
        return KernelLanguage::python3();
    };
    let kernelspec = meta.get("kernelspec");
    let language_info = meta.get("language_info");

    let name = kernelspec
        .and_then(|k| k.get("language"))
        .and_then(Value::as_str)
        .or_else(|| language_info.and_then(|l| l.get("name")).and_then(Value::as_str))
        .map(|s| s.trim().to_ascii_lowercase());
    let Some(name) = name else {
        return KernelLanguage::python3();
    };

    let digits = |s: &str| -> Option<u32> {
        s.chars()
            .skip_while(|c| !c.is_ascii_digit())
            .take_while(|c| c.is_ascii_digit())
            .collect::<String>()
            .parse()
            .ok()
    };
    let major = language_info
        .and_then(|l| l.get("version"))
        .and_then(Value::as_str)
        .and_then(digits)
        .or_else(|| {
            language_info
                .and_then(|l| l.get("codemirror_mode"))
                .and_then(|c| c.get("version"))
                .and_then(|v| v.as_u64().map(|v| v as u32))
        })
        .or_else(|| {
            kernelspec
                .and_then(|k| k.get("name"))
                .and_then(Value::as_str)
                .filter(|n| n.to_ascii_lowercase().starts_with(&name))
                .and_then(digits)
        });
    let major = if name == "python" { major.or(Some(3)) } else { major };
    KernelLanguage { name, major }
}

/// Parses an nbformat 4.x document.
pub fn parse_notebook(raw: &[u8], path: impl AsRef<Path>) -> Result<Notebook, NotebookError> {
    let path = path.as_ref();
    let text = std::str::from_utf8(raw).map_err(|e| corrupted(path, format!("encoding: {e}")))?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let value: Value =
        serde_json::from_str(text).map_err(|e| corrupted(path, format!("json: {e}")))?;
    let Value::Object(mut document) = value else {
        return Err(corrupted(path, "top level is not an object"));
    };

    let major = document
        .get("nbformat")
        .and_then(Value::as_u64)
        .ok_or_else(|| corrupted(path, "missing nbformat"))?;
    if major != 4 {
        return Err(corrupted(path, format!("unsupported nbformat {major}")));
    }
    let minor = document
        .get("nbformat_minor")
        .and_then(Value::as_u64)
        .unwrap_or(0);

    let Some(Value::Array(raw_cells)) = document.remove("cells") else {
        return Err(corrupted(path, "missing cells array"));
    };

    let mut cells = Vec::with_capacity(raw_cells.len());
    for (index, raw_cell) in raw_cells.into_iter().enumerate() {
        let Value::Object(mut obj) = raw_cell else {
            return Err(corrupted(path, format!("cell {index} is not an object")));
        };
        let kind = obj
            .remove("cell_type")
            .and_then(|v| v.as_str().and_then(CellKind::from_str))
            .ok_or_else(|| corrupted(path, format!("cell {index} has no valid cell_type")))?;
        let (source, source_as_lines) = match obj.remove("source") {
            Some(v) => join_source(&v)
                .ok_or_else(|| corrupted(path, format!("cell {index} has malformed source")))?,
            None => (String::new(), true),
        };
        let recorded_exec_count = if kind == CellKind::Code {
            obj.remove("execution_count").and_then(|v| v.as_i64())
        } else {
            None
        };
        cells.push(Cell {
            index,
            kind,
            source,
            recorded_exec_count,
            extra: obj,
            source_as_lines,
        });
    }

    let kernel_language = detect_kernel_language(document.get("metadata"));
    Ok(Notebook {
        path: path.to_path_buf(),
        format_version: (major, minor),
        kernel_language,
        cells,
        repo: None,
        document,
    })
}

pub fn screen_notebook(nb: &Notebook) -> ScreeningVerdict {
    if !nb.kernel_language.is_python3() {
        return ScreeningVerdict {
            status: ScreeningStatus::NonPython3,
            detail: format!("kernel language is {}", nb.kernel_language),
        };
    }
    let code: Vec<&Cell> = code_cells(nb).collect();
    if code.is_empty() {
        return ScreeningVerdict {
            status: ScreeningStatus::NoCode,
            detail: "notebook has no code cells".into(),
        };
    }
    if code.iter().all(|c| c.is_blank()) {
        return ScreeningVerdict {
            status: ScreeningStatus::NoCode,
            detail: "all code cells are empty".into(),
        };
    }
    ScreeningVerdict {
        status: ScreeningStatus::Ok,
        detail: format!("{} code cells", code.len()),
    }
}

pub fn code_cells(nb: &Notebook) -> impl Iterator<Item = &Cell> {
    nb.cells.iter().filter(|c| c.is_code())
}

/// Marker line emitted before each code cell in script form.
pub fn cell_marker(index: usize) -> String {
    format!("# --- cell {index} ---")
}

/// Code cells as one script, each block introduced by [`cell_marker`].
///
/// Every block is `marker\n` + source + `\n`, so [`split_script`] recovers
/// the original sources exactly.
pub fn to_script(nb: &Notebook) -> String {
    let mut out = String::new();
    for cell in code_cells(nb) {
        out.push_str(&cell_marker(cell.index));
        out.push('\n');
        out.push_str(&cell.source);
        out.push('\n');
    }
    out
}

/// Inverse of [`to_script`]: `(cell index, source)` pairs.
pub fn split_script(script: &str) -> Vec<(usize, String)> {
    let mut blocks: Vec<(usize, String)> = Vec::new();
    for line in script.split_inclusive('\n') {
        let bare = line.trim_end_matches('\n');
        let marker_index = bare
            .strip_prefix("# --- cell ")
            .and_then(|r| r.strip_suffix(" ---"))
            .and_then(|n| n.parse::<usize>().ok());
        match marker_index {
            Some(i) => blocks.push((i, String::new())),
            None => {
                if let Some((_, body)) = blocks.last_mut() {
                    body.push_str(line);
                }
            }
        }
    }
    for (_, body) in &mut blocks {
        if body.ends_with('\n') {
            body.pop();
        }
    }
    blocks
}

/// Returns a copy with a new code cell at position `at`.
pub fn insert_cell(nb: &Notebook, at: usize, source: &str) -> Result<Notebook, NotebookError> {
    if at > nb.cells.len() {
        return Err(NotebookError::IndexOutOfRange {
            at,
            len: nb.cells.len(),
        });
    }
    let mut out = nb.clone();
    let mut cell = Cell::code(at, source);
    cell.mark_inserted();
    out.cells.insert(at, cell);
    for (i, c) in out.cells.iter_mut().enumerate() {
        c.index = i;
    }
    Ok(out)
}

pub fn write_notebook(nb: &Notebook) -> Vec<u8> {
    let mut doc = Map::new();
    let cells: Vec<Value> = nb
        .cells
        .iter()
        .map(|c| {
            let mut obj = Map::new();
            obj.insert("cell_type".into(), Value::String(c.kind.as_str().into()));
            if c.kind == CellKind::Code {
                obj.insert(
                    "execution_count".into(),
                    c.recorded_exec_count.map(Value::from).unwrap_or(Value::Null),
                );
            }
            for (k, v) in &c.extra {
                obj.insert(k.clone(), v.clone());
            }
            let source = if c.source_as_lines {
                split_source_lines(&c.source)
            } else {
                Value::String(c.source.clone())
            };
            obj.insert("source".into(), source);
            Value::Object(obj)
        })
        .collect();
    doc.insert("cells".into(), Value::Array(cells));
    for (k, v) in &nb.document {
        doc.insert(k.clone(), v.clone());
    }
    let mut bytes = serde_json::to_vec_pretty(&Value::Object(doc)).expect("json value serializes");
    bytes.push(b'\n');
    bytes
}

impl Notebook {
    pub fn read(path: impl AsRef<Path>) -> Result<Notebook, NotebookError> {
        let path = path.as_ref();
        let raw = std::fs::read(path).map_err(|e| corrupted(path, format!("read: {e}")))?;
        parse_notebook(&raw, path)
    }

    /// Builds an in-memory Python 3 notebook from `(kind, source)` pairs.
    pub fn from_cells(path: impl AsRef<Path>, cells: &[(CellKind, &str)]) -> Notebook {
        let cells = cells
            .iter()
            .enumerate()
            .map(|(i, (kind, src))| match kind {
                CellKind::Code => Cell::code(i, *src),
                CellKind::Markdown => Cell::markdown(i, *src),
                CellKind::Raw => {
                    let mut c = Cell::markdown(i, *src);
                    c.kind = CellKind::Raw;
                    c
                }
            })
            .collect();
        let mut document = Map::new();
        document.insert(
            "metadata".into(),
            serde_json::json!({
                "kernelspec": {"display_name": "Python 3", "language": "python", "name": "python3"},
                "language_info": {"name": "python", "version": "3.10.12"}
            }),
        );
        document.insert("nbformat".into(), Value::from(4));
        document.insert("nbformat_minor".into(), Value::from(5));
        Notebook {
            path: path.as_ref().to_path_buf(),
            format_version: (4, 5),
            kernel_language: KernelLanguage::python3(),
            cells,
            repo: None,
            document,
        }
    }

    /// Directory the notebook runs in; relative input paths resolve here.
    pub fn workdir(&self) -> PathBuf {
        match self.path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        }
    }

    pub fn code_cell_count(&self) -> usize {
        code_cells(self).count()
    }

    /// SHA-256 over the script form; identifies notebook content for replay.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(to_script(self).as_bytes()))
    }

    /// Location for the mutated copy: `name.restored.ipynb` next to the original.
    pub fn restored_path(&self) -> PathBuf {
        let stem = self
            .path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "notebook".into());
        self.path.with_file_name(format!("{stem}.restored.ipynb"))
    }
}
