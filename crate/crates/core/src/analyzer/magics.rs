//! Removal of interactive-shell syntax (`%magic`, `!shell`, `%%cell`, `obj?`)
//! ahead of parsing. Line numbers are preserved: each stripped line becomes a
//! `pass` (or `name = None` for captured shell output) at the same indent.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MagicKind {
    LineMagic,
    Shell,
    CellMagic,
    Help,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MagicAnnotation {
    /// 1-based line within the cell.
    pub line: usize,
    pub kind: MagicKind,
    pub text: String,
}

/// Cell magics whose body is still Python.
const PYTHON_BODY_CELL_MAGICS: &[&str] = &["time", "timeit", "capture", "prun", "debug", "memit"];

fn assign_capture() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^(\s*)([A-Za-z_][A-Za-z0-9_]*(?:\s*,\s*[A-Za-z_][A-Za-z0-9_]*)*)\s*=\s*([!%].*)$")
            .expect("valid regex")
    })
}

fn help_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*\??[A-Za-z_][A-Za-z0-9_.]*\?{1,2}\s*$").expect("valid regex"))
}

pub fn strip_magics(source: &str) -> (String, Vec<MagicAnnotation>) {
    let mut annotations = Vec::new();
    let mut out = String::with_capacity(source.len());
    let lines: Vec<&str> = source.split('\n').collect();

    let first_code = lines.iter().position(|l| !l.trim().is_empty());
    if let Some(first) = first_code {
        let head = lines[first].trim_start();
        if let Some(rest) = head.strip_prefix("%%") {
            let name = rest.split_whitespace().next().unwrap_or("");
            annotations.push(MagicAnnotation {
                line: first + 1,
                kind: MagicKind::CellMagic,
                text: head.to_string(),
            });
            if !PYTHON_BODY_CELL_MAGICS.contains(&name) {
                // Non-Python body (bash, html, writefile, ...): nothing to analyze.
                return (vec![""; lines.len()].join("\n"), annotations);
            }
        }
    }

    let mut continuing = false;
    for (i, line) in lines.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let trimmed = line.trim_start();
        let indent = &line[..line.len() - trimmed.len()];
        if continuing {
            continuing = line.trim_end().ends_with('\\');
            continue;
        }
        let replacement = if Some(i) == first_code && trimmed.starts_with("%%") {
            Some(String::new())
        } else if trimmed.starts_with('%') || trimmed.starts_with('!') {
            annotations.push(MagicAnnotation {
                line: i + 1,
                kind: if trimmed.starts_with('!') {
                    MagicKind::Shell
                } else {
                    MagicKind::LineMagic
                },
                text: trimmed.to_string(),
            });
            Some(format!("{indent}pass"))
        } else if let Some(caps) = assign_capture().captures(line) {
            let rhs = &caps[3];
            annotations.push(MagicAnnotation {
                line: i + 1,
                kind: if rhs.starts_with('!') {
                    MagicKind::Shell
                } else {
                    MagicKind::LineMagic
                },
                text: trimmed.to_string(),
            });
            Some(format!("{}{} = None", &caps[1], &caps[2]))
        } else if help_line().is_match(line) {
            annotations.push(MagicAnnotation {
                line: i + 1,
                kind: MagicKind::Help,
                text: trimmed.to_string(),
            });
            Some(format!("{indent}pass"))
        } else {
            None
        };
        match replacement {
            Some(r) => {
                continuing = line.trim_end().ends_with('\\');
                out.push_str(&r);
            }
            None => out.push_str(line),
        }
    }
    (out, annotations)
}
