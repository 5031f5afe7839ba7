use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestKind {
    Requirements,
    Pipfile,
    Pyproject,
    SetupCfg,
    SetupPy,
    CondaEnvironment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequirementSource {
    pub path: PathBuf,
    pub kind: ManifestKind,
}

fn kind_of(file_name: &str) -> Option<ManifestKind> {
    let lower = file_name.to_ascii_lowercase();
    if lower.starts_with("requirements") && lower.ends_with(".txt") {
        return Some(ManifestKind::Requirements);
    }
    match lower.as_str() {
        "pipfile" => Some(ManifestKind::Pipfile),
        "pyproject.toml" => Some(ManifestKind::Pyproject),
        "setup.cfg" => Some(ManifestKind::SetupCfg),
        "setup.py" => Some(ManifestKind::SetupPy),
        "environment.yml" | "environment.yaml" => Some(ManifestKind::CondaEnvironment),
        _ => None,
    }
}

/// Dependency manifests at the top of `repo_root`, pip-style before conda-style.
pub fn discover_requirements(repo_root: &Path) -> Vec<RequirementSource> {
    let Ok(entries) = fs::read_dir(repo_root) else {
        return Vec::new();
    };
    let mut found: Vec<RequirementSource> = entries
        .filter_map(Result::ok)
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            kind_of(&name).map(|kind| RequirementSource { path: e.path(), kind })
        })
        .collect();
    found.sort_by(|a, b| a.kind.cmp(&b.kind).then_with(|| a.path.cmp(&b.path)));
    found
}

/// Package specs declared by a manifest. Unreadable or malformed files yield
/// nothing; installation is best-effort.
pub fn parse_manifest(src: &RequirementSource) -> Vec<String> {
    let Ok(text) = fs::read_to_string(&src.path) else {
        return Vec::new();
    };
    match src.kind {
        ManifestKind::Requirements => requirements_txt(&text),
        ManifestKind::Pipfile => pipfile(&text),
        ManifestKind::Pyproject => pyproject(&text),
        ManifestKind::SetupCfg => setup_cfg(&text),
        ManifestKind::SetupPy => setup_py(&text),
        ManifestKind::CondaEnvironment => conda_env(&text),
    }
}

fn requirements_txt(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.split(" #").next().unwrap_or("").trim())
        .filter(|l| !l.is_empty() && !l.starts_with('#') && !l.starts_with('-'))
        .map(str::to_string)
        .collect()
}

fn pipfile(text: &str) -> Vec<String> {
    let Ok(doc) = text.parse::<toml::Table>() else {
        return Vec::new();
    };
    let Some(pkgs) = doc.get("packages").and_then(|p| p.as_table()) else {
        return Vec::new();
    };
    pkgs.iter()
        .map(|(name, v)| match v.as_str() {
            Some("*") | None => name.clone(),
            Some(ver) => format!("{name}{ver}"),
        })
        .collect()
}

fn pyproject(text: &str) -> Vec<String> {
    let Ok(doc) = text.parse::<toml::Table>() else {
        return Vec::new();
    };
    if let Some(deps) = doc
        .get("project")
        .and_then(|p| p.get("dependencies"))
        .and_then(|d| d.as_array())
    {
        return deps.iter().filter_map(|d| d.as_str().map(str::to_string)).collect();
    }
    doc.get("tool")
        .and_then(|t| t.get("poetry"))
        .and_then(|p| p.get("dependencies"))
        .and_then(|d| d.as_table())
        .map(|t| t.keys().filter(|k| *k != "python").cloned().collect())
        .unwrap_or_default()
}

fn setup_cfg(text: &str) -> Vec<String> {
    let mut in_options = false;
    let mut collecting = false;
    let mut out = Vec::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            in_options = trimmed == "[options]";
            collecting = false;
            continue;
        }
        if !in_options {
            continue;
        }
        if collecting {
            if line.starts_with(char::is_whitespace) && !trimmed.is_empty() {
                out.push(trimmed.to_string());
                continue;
            }
            collecting = false;
        }
        if let Some(rest) = trimmed.strip_prefix("install_requires") {
            let value = rest.trim_start().trim_start_matches('=').trim();
            if !value.is_empty() {
                out.extend(value.split(';').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()));
            }
            collecting = true;
        }
    }
    out
}

fn setup_py(text: &str) -> Vec<String> {
    static BLOCK: OnceLock<Regex> = OnceLock::new();
    static ITEM: OnceLock<Regex> = OnceLock::new();
    let block = BLOCK.get_or_init(|| Regex::new(r"(?s)install_requires\s*=\s*\[(.*?)\]").expect("valid regex"));
    let item = ITEM.get_or_init(|| Regex::new(r#"['"]([^'"]+)['"]"#).expect("valid regex"));
    block
        .captures(text)
        .map(|c| item.captures_iter(&c[1]).map(|m| m[1].trim().to_string()).collect())
        .unwrap_or_default()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CondaDep {
    Spec(String),
    Pip { pip: Vec<String> },
    #[allow(dead_code)]
    Other(serde_yaml::Value),
}

#[derive(Deserialize)]
struct CondaEnv {
    #[serde(default)]
    dependencies: Vec<CondaDep>,
}

fn conda_env(text: &str) -> Vec<String> {
    let Ok(env) = serde_yaml::from_str::<CondaEnv>(text) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for dep in env.dependencies {
        match dep {
            CondaDep::Spec(s) => {
                let s = s.rsplit("::").next().unwrap_or(&s).trim().to_string();
                let name = s.split(['=', '<', '>', ' ']).next().unwrap_or("");
                if name.is_empty() || name == "python" || name == "pip" {
                    continue;
                }
                // conda pins use a single '='
                out.push(match s.split_once('=') {
                    Some((n, v)) if !v.starts_with('=') => format!("{n}=={}", v.split('=').next().unwrap_or(v)),
                    _ => s,
                });
            }
            CondaDep::Pip { pip } => out.extend(pip),
            CondaDep::Other(_) => {}
        }
    }
    out
}
