//! Prompt templates, reply parsing and a record/replay completion client.

mod client;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analyzer;
use crate::notebook::{cell_marker, split_script};

pub use client::{
    CompletionRequest, HttpTransport, LlmClient, LlmSettings, Mode, ReplayStore, StoredExchange, Transport,
    TransportError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    ModuleName,
    InputFile,
    NameDefinition,
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Template::ModuleName => "module_name",
            Template::InputFile => "input_file",
            Template::NameDefinition => "name_definition",
        })
    }
}

const ROLE: &str = "You are an expert Python developer who restores the executability of Jupyter notebooks.";

const MODULE_NAME_BODY: &str = "\
The code cells of a notebook are shown below as one script. Each cell starts with a marker comment.

```python
{script}
```

Running the notebook fails with:
{ename}: {evalue}

Installing it with `pip install {module}` failed because no package with that name exists.
What is the correct and updated name of the package that provides the module `{module}`? \
Answer with the installable package name only, inside a code block.
";

const INPUT_FILE_BODY: &str = "\
The code cells of a notebook are shown below as one script. Each cell starts with a marker comment.

```python
{script}
```

Running the notebook fails because an input file is missing:
{ename}: {evalue}
Missing file: {path} (type: {file_type})

Generate synthetic content for `{path}` so that all cells can run. \
The content must be a valid {file_type} file and match how the cells read and use it: \
column names, value types, label values and enough rows. \
Answer with the complete file content inside a single code block.
";

const NAME_DEFINITION_BODY: &str = "\
The code cells of a notebook are shown below as one script. Each cell starts with a marker comment.

```python
{script}
```

Running the cells in order fails in cell {error_cell} with:
{ename}: {evalue}
Definition search for `{name}`: {def_location}

Write a Python definition of `{name}` that matches how the notebook uses it, \
including any imports the definition needs. \
Answer with the code only, inside a single code block.
";

impl Template {
    fn body(self) -> &'static str {
        match self {
            Template::ModuleName => MODULE_NAME_BODY,
            Template::InputFile => INPUT_FILE_BODY,
            Template::NameDefinition => NAME_DEFINITION_BODY,
        }
    }

    /// Context fields the template interpolates, in order of first use.
    pub fn required_fields(self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = Vec::new();
        for c in placeholder().captures_iter(self.body()) {
            let name = c.get(1).expect("group").as_str();
            if !out.contains(&name) {
                out.push(name);
            }
        }
        out
    }
}

fn placeholder() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").expect("valid regex"))
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LlmError {
    #[error("template {template} needs context field `{field}`")]
    MissingContextField { template: Template, field: String },
    #[error("completion endpoint unavailable: {0}")]
    EndpointUnavailable(String),
    #[error("no recorded reply for prompt {fingerprint}")]
    ReplayMiss { fingerprint: String },
    #[error("completion budget exhausted")]
    BudgetExceeded,
    #[error("replay store error: {0}")]
    Store(String),
}

pub type Context = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub template: Template,
    pub context: Context,
    pub rendered: String,
    pub fingerprint: String,
}

pub fn fingerprint(rendered: &str) -> String {
    let normalized = rendered.replace("\r\n", "\n");
    hex::encode(Sha256::digest(normalized.as_bytes()))
}

pub fn render(template: Template, context: &Context) -> Result<PromptSpec, LlmError> {
    for field in template.required_fields() {
        if !context.contains_key(field) {
            return Err(LlmError::MissingContextField {
                template,
                field: field.to_string(),
            });
        }
    }
    let body = placeholder().replace_all(template.body(), |c: &regex::Captures<'_>| {
        context[c.get(1).expect("group").as_str()].clone()
    });
    let rendered = format!("{ROLE}\n\n{body}").replace("\r\n", "\n");
    Ok(PromptSpec {
        template,
        context: context.clone(),
        fingerprint: fingerprint(&rendered),
        rendered,
    })
}

/// Approximate token count used for context budgeting.
pub fn approx_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

/// Number of cells before the erroring one that are never dropped.
pub const KEPT_PREDECESSORS: usize = 3;

/// Shrinks a script to `budget` tokens by dropping the earliest cells, keeping
/// the erroring cell and its predecessors. Returns the script unchanged when
/// it already fits.
pub fn truncate_script(script: &str, error_cell: usize, budget: usize) -> String {
    if approx_tokens(script) <= budget {
        return script.to_string();
    }
    let mut blocks = split_script(script);
    let pos = blocks.iter().position(|(i, _)| *i == error_cell).unwrap_or(blocks.len().saturating_sub(1));
    let protected_from = pos.saturating_sub(KEPT_PREDECESSORS);
    let render = |blocks: &[(usize, String)]| {
        blocks
            .iter()
            .map(|(i, src)| format!("{}\n{}\n", cell_marker(*i), src))
            .collect::<String>()
    };
    let mut dropped = 0;
    while dropped < protected_from && approx_tokens(&render(&blocks)) > budget {
        blocks.remove(0);
        dropped += 1;
    }
    render(&blocks)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    ModuleName { package: String },
    InputFile { path: String, content: String },
    Definition { source: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmReply {
    pub raw: String,
    pub payload: Option<Payload>,
    pub usable: bool,
}

impl LlmReply {
    pub fn parse(spec: &PromptSpec, raw: String) -> Self {
        let payload = extract_payload(spec, &raw).ok();
        LlmReply {
            usable: payload.is_some(),
            payload,
            raw,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("reply has no usable {template} payload: {reason}")]
pub struct Unusable {
    pub template: Template,
    pub reason: String,
}

fn fenced_blocks(text: &str) -> Vec<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?s)```[^\n`]*\n(.*?)```").expect("valid regex"));
    re.captures_iter(&text.replace("\r\n", "\n"))
        .map(|c| c[1].to_string())
        .collect()
}

fn package_token(candidate: &str) -> Option<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"^[A-Za-z0-9][A-Za-z0-9._-]*(\[[A-Za-z0-9,._-]+\])?([<>=!~]=?[A-Za-z0-9.*+!-]+)?$").expect("valid regex")
    });
    let words = candidate.split_whitespace().peekable();
    let mut token = None;
    for w in words {
        match w {
            "pip" | "pip3" | "!pip" | "%pip" | "python" | "-m" | "install" | "conda" => continue,
            w if w.starts_with('-') => continue,
            w => {
                token = Some(w.trim_matches(|c| c == '`' || c == '\'' || c == '"' || c == ',' || c == '.'));
                break;
            }
        }
    }
    token.filter(|t| re.is_match(t)).map(str::to_string)
}

fn quoted_tokens(text: &str) -> Vec<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r#"`([^`\n]+)`|'([^'\n]+)'|"([^"\n]+)""#).expect("valid regex"));
    re.captures_iter(text)
        .filter_map(|c| c.get(1).or(c.get(2)).or(c.get(3)).map(|m| m.as_str().to_string()))
        .collect()
}

pub fn extract_payload(spec: &PromptSpec, reply: &str) -> Result<Payload, Unusable> {
    let unusable = |reason: &str| Unusable {
        template: spec.template,
        reason: reason.to_string(),
    };
    let blocks = fenced_blocks(reply);
    match spec.template {
        Template::ModuleName => blocks
            .iter()
            .flat_map(|b| b.lines().map(str::to_string).collect::<Vec<_>>())
            .chain(quoted_tokens(reply))
            .find_map(|line| package_token(&line))
            .map(|package| Payload::ModuleName { package })
            .ok_or_else(|| unusable("no package name found")),
        Template::InputFile => {
            let content = blocks.into_iter().next().ok_or_else(|| unusable("no code block"))?;
            if content.trim().is_empty() {
                return Err(unusable("empty file content"));
            }
            let path = spec.context.get("path").cloned().unwrap_or_default();
            Ok(Payload::InputFile { path, content })
        }
        Template::NameDefinition => {
            let source = blocks.into_iter().next().ok_or_else(|| unusable("no code block"))?;
            let name = spec.context.get("name").map(String::as_str).unwrap_or("");
            let scan = analyzer::def_use(&source).map_err(|e| unusable(&e.to_string()))?;
            if !name.is_empty() && !scan.defines(name) {
                return Err(unusable(&format!("code does not define `{name}`")));
            }
            Ok(Payload::Definition { source })
        }
    }
}
