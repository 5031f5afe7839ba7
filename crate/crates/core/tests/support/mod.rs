#![allow(dead_code)]

//! Test doubles shared by the integration tests.
//!
//! `SimExecutor` interprets a cell well enough to reproduce the environment
//! errors the restorer handles. Imports of modules that are neither stdlib nor
//! installed raise ModuleNotFoundError, literal file reads of missing paths and
//! writes into missing directories raise FileNotFoundError, and names that
//! nothing earlier in the session defines raise NameError. Comment directives
//! add everything else:
//!
//! ```text
//! # raises: ValueError: bad shape
//! # breaks-if-installed: pkg
//! # hang
//! # crash
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};
use std::thread;
use std::time::Instant;

use nbrestore::analyzer::{imported_modules, is_stdlib_module, notebook_def_use};
use nbrestore::harness::{
    CellRun, Executor, HarnessError, IndexPackage, IndexProvisioner, SandboxEnv, Session,
};
use nbrestore::llm::{CompletionRequest, Transport, TransportError};
use nbrestore::notebook::{write_notebook, CellKind, Notebook};
use regex::Regex;

pub struct SimExecutor;

struct SimSession {
    env: SandboxEnv,
    workdir: PathBuf,
    history: Vec<String>,
}

fn error(ename: &str, evalue: String, line: &str) -> CellRun {
    CellRun::Error {
        ename: ename.to_string(),
        evalue,
        traceback: vec![format!("----> 1 {line}")],
    }
}

fn read_call() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"(?:open|read_csv|read_json|read_table|loadtxt|imread)\(\s*['"]([^'"]+)['"]\s*(?:\)|,\s*['"]r)"#)
            .unwrap()
    })
}

fn write_call() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"(?:open\(\s*['"]([^'"]+)['"]\s*,\s*['"][wa]|\.to_csv\(\s*['"]([^'"]+)['"])"#).unwrap())
}

fn directive<'s>(src: &'s str, key: &str) -> Option<&'s str> {
    src.lines().find_map(|l| {
        let l = l.trim().strip_prefix('#')?.trim();
        let rest = l.strip_prefix(key)?;
        Some(rest.trim_start_matches(':').trim())
    })
}

impl SimSession {
    fn run(&mut self, source: &str, deadline: Instant) -> CellRun {
        if directive(source, "hang").is_some() {
            thread::sleep(deadline.saturating_duration_since(Instant::now()));
            return CellRun::Timeout;
        }
        if directive(source, "crash").is_some() {
            return CellRun::Crashed("kernel died".into());
        }
        for module in imported_modules(source) {
            if !is_stdlib_module(&module) && !self.env.has_module(&module) {
                let line = source.lines().find(|l| l.contains(&module)).unwrap_or_default();
                return error("ModuleNotFoundError", format!("No module named '{module}'"), line);
            }
        }
        if let Some(pkg) = directive(source, "breaks-if-installed") {
            if self.env.has_module(pkg) {
                return error("ImportError", format!("cannot import name 'legacy' from '{pkg}'"), source);
            }
        }
        for line in source.lines() {
            if let Some(c) = write_call().captures(line) {
                let path = c.get(1).or_else(|| c.get(2)).unwrap().as_str();
                let parent = Path::new(path).parent().unwrap_or(Path::new(""));
                if !self.workdir.join(parent).is_dir() {
                    return error(
                        "FileNotFoundError",
                        format!("[Errno 2] No such file or directory: '{path}'"),
                        line,
                    );
                }
            } else if let Some(c) = read_call().captures(line) {
                let path = &c[1];
                if !self.workdir.join(path).is_file() {
                    return error(
                        "FileNotFoundError",
                        format!("[Errno 2] No such file or directory: '{path}'"),
                        line,
                    );
                }
            }
        }
        let mut cells: Vec<(CellKind, &str)> = self.history.iter().map(|s| (CellKind::Code, s.as_str())).collect();
        cells.push((CellKind::Code, source));
        let nb = Notebook::from_cells("sim.ipynb", &cells);
        match notebook_def_use(&nb) {
            Ok(du) => {
                if let Some(name) = du.undefined_names(cells.len() - 1).into_iter().next() {
                    return error("NameError", format!("name '{name}' is not defined"), source);
                }
            }
            Err(e) => return error("SyntaxError", e.to_string(), source),
        }
        if let Some(spec) = directive(source, "raises") {
            let (ename, evalue) = spec.split_once(':').unwrap_or((spec, ""));
            return error(ename.trim(), evalue.trim().to_string(), source);
        }
        self.history.push(source.to_string());
        CellRun::Ok
    }
}

impl Session for SimSession {
    fn run_cell(&mut self, _cell_index: usize, source: &str, deadline: Instant) -> Result<CellRun, HarnessError> {
        Ok(self.run(source, deadline))
    }

    fn close(&mut self) {}
}

impl Executor for SimExecutor {
    fn open(&self, _nb: &Notebook, env: &SandboxEnv, workdir: &Path) -> Result<Box<dyn Session>, HarnessError> {
        Ok(Box::new(SimSession {
            env: env.clone(),
            workdir: workdir.to_path_buf(),
            history: Vec::new(),
        }))
    }
}

/// Answers each prompt kind from fixed tables and counts the calls it gets.
#[derive(Clone, Default)]
pub struct ScriptedModel {
    /// module → package name to suggest
    pub packages: HashMap<String, String>,
    /// name → definition source
    pub definitions: HashMap<String, String>,
    /// extension → file body
    pub files: HashMap<String, String>,
    pub calls: Arc<AtomicUsize>,
}

fn capture(text: &str, re: &str) -> Option<String> {
    Regex::new(re).unwrap().captures(text).map(|c| c[1].to_string())
}

impl ScriptedModel {
    pub fn package(mut self, module: &str, package: &str) -> Self {
        self.packages.insert(module.into(), package.into());
        self
    }

    pub fn definition(mut self, name: &str, source: &str) -> Self {
        self.definitions.insert(name.into(), source.into());
        self
    }

    pub fn file(mut self, ext: &str, body: &str) -> Self {
        self.files.insert(ext.into(), body.into());
        self
    }

    pub fn answer(&self, prompt: &str) -> String {
        if let Some(module) = capture(prompt, r"provides the module `([^`]+)`") {
            let pkg = self.packages.get(&module).cloned().unwrap_or(module);
            return format!("The package is:\n```\n{pkg}\n```");
        }
        if let Some(ext) = capture(prompt, r"Missing file: .* \(type: (\w*)\)") {
            let body = self.files.get(&ext).cloned().unwrap_or_else(|| "a,b\n1,2\n".into());
            return format!("```{ext}\n{body}```");
        }
        if let Some(name) = capture(prompt, r"Definition search for `([^`]+)`") {
            let body = self.definitions.get(&name).cloned().unwrap_or_else(|| format!("{name} = 0"));
            return format!("```python\n{body}\n```");
        }
        "I cannot help with that.".into()
    }
}

impl Transport for ScriptedModel {
    fn complete(&self, request: &CompletionRequest) -> Result<String, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.answer(&request.prompt))
    }
}

/// Offline catalogue where each `(package, module)` pair installs `module`.
pub fn catalogue(entries: &[(&str, &str)]) -> IndexProvisioner {
    let packages: BTreeMap<String, IndexPackage> = entries
        .iter()
        .map(|(pkg, module)| {
            (
                pkg.to_string(),
                IndexPackage {
                    versions: vec!["1.0".into()],
                    modules: vec![module.to_string()],
                    ..IndexPackage::default()
                },
            )
        })
        .collect();
    IndexProvisioner::new(packages)
}

/// Writes a notebook of code cells under `dir` and returns it.
pub fn write_code_notebook(path: &Path, cells: &[&str]) -> Notebook {
    let spec: Vec<(CellKind, &str)> = cells.iter().map(|s| (CellKind::Code, *s)).collect();
    let nb = Notebook::from_cells(path, &spec);
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, write_notebook(&nb)).unwrap();
    nb
}

/// Byte snapshot of every file below `root`.
pub fn tree_snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    walkdir::WalkDir::new(root)
        .into_iter()
        .filter_map(Result::ok)
        .map(|e| {
            let rel = e.path().strip_prefix(root).unwrap().to_path_buf();
            let body = if e.file_type().is_file() { fs::read(e.path()).unwrap() } else { Vec::new() };
            (rel, body)
        })
        .collect()
}
