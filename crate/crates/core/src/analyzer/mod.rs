//! Compile screening and def-use analysis over notebook code cells.

mod defuse;
pub mod magics;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::OnceLock;

use indexmap::{IndexMap, IndexSet};
use rustpython_parser::{ast, Parse, ParseError, ParseErrorType};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use defuse::{CallableTable, CellScan, DefKind, WILDCARD};
pub use magics::{strip_magics, MagicAnnotation, MagicKind};

use crate::notebook::{code_cells, Notebook};

const BUILTINS_SNAPSHOT: &str = include_str!("../../data/builtins.txt");
const STDLIB_SNAPSHOT: &str = include_str!("../../data/stdlib_modules.txt");

fn snapshot_set(text: &'static str) -> HashSet<&'static str> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
}

/// Names available in a fresh kernel session without any definition.
pub fn builtin_names() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| snapshot_set(BUILTINS_SNAPSHOT))
}

pub fn is_builtin(name: &str) -> bool {
    builtin_names().contains(name)
}

/// Top-level modules shipped with the interpreter.
pub fn is_stdlib_module(name: &str) -> bool {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| snapshot_set(STDLIB_SNAPSHOT)).contains(name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompileErrorKind {
    Syntax,
    Indentation,
    OtherCompile,
}

impl CompileErrorKind {
    /// Exception class name the interpreter would raise.
    pub fn ename(self) -> &'static str {
        match self {
            CompileErrorKind::Syntax => "SyntaxError",
            CompileErrorKind::Indentation => "IndentationError",
            CompileErrorKind::OtherCompile => "CompileError",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceLocation {
    pub cell: usize,
    /// 1-based
    pub line: usize,
    /// 1-based, in characters
    pub column: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompileResult {
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_kind: Option<CompileErrorKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub location: Option<SourceLocation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl CompileResult {
    fn ok() -> Self {
        CompileResult {
            ok: true,
            error_kind: None,
            location: None,
            message: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cell {cell} does not compile: {message}")]
pub struct ParseFailure {
    pub cell: usize,
    pub kind: CompileErrorKind,
    pub line: usize,
    pub column: usize,
    pub message: String,
}

fn line_col(source: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(source.len());
    let before = &source[..offset];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map(|l| l.chars().count()).unwrap_or(0) + 1;
    (line, col)
}

fn classify_parse_error(err: &ParseError) -> CompileErrorKind {
    use rustpython_parser::lexer::LexicalErrorType as L;
    if err.error.is_indentation_error() {
        return CompileErrorKind::Indentation;
    }
    match &err.error {
        ParseErrorType::Lexical(L::TabError | L::TabsAfterSpaces) => CompileErrorKind::Indentation,
        ParseErrorType::Lexical(
            L::DefaultArgumentError
            | L::DuplicateArgumentError(_)
            | L::PositionalArgumentError
            | L::UnpackedArgumentError
            | L::DuplicateKeywordArgumentError(_),
        ) => CompileErrorKind::Syntax,
        ParseErrorType::Lexical(L::OtherError(_)) => CompileErrorKind::OtherCompile,
        _ => CompileErrorKind::Syntax,
    }
}

/// Parses one cell (after magic stripping) into a statement list.
pub fn compile_source(source: &str, cell: usize) -> Result<ast::Suite, ParseFailure> {
    let (stripped, _) = strip_magics(source);
    ast::Suite::parse(&stripped, "<cell>").map_err(|e| {
        let (line, column) = line_col(&stripped, u32::from(e.offset) as usize);
        ParseFailure {
            cell,
            kind: classify_parse_error(&e),
            line,
            column,
            message: e.error.to_string(),
        }
    })
}

/// First compile error across code cells in document order.
pub fn check_compilable(nb: &Notebook) -> CompileResult {
    for cell in code_cells(nb) {
        if let Err(f) = compile_source(&cell.source, cell.index) {
            return CompileResult {
                ok: false,
                error_kind: Some(f.kind),
                location: Some(SourceLocation {
                    cell: f.cell,
                    line: f.line,
                    column: f.column,
                }),
                message: Some(f.message),
            };
        }
    }
    CompileResult::ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDefUse {
    pub cell_index: usize,
    pub defs: IndexMap<String, DefKind>,
    pub uses: IndexSet<String>,
    pub deleted: IndexSet<String>,
    pub loaded_after_delete: IndexSet<String>,
    pub wildcard: bool,
    pub annotations: Vec<MagicAnnotation>,
}

impl CellDefUse {
    fn from_scan(cell_index: usize, scan: CellScan, annotations: Vec<MagicAnnotation>) -> Self {
        CellDefUse {
            cell_index,
            defs: scan.defs,
            uses: scan.uses,
            deleted: scan.deleted,
            loaded_after_delete: scan.loaded_after_delete,
            wildcard: scan.wildcard,
            annotations,
        }
    }

    pub fn defines(&self, name: &str) -> bool {
        self.defs.contains_key(name)
    }
}

fn scan_cell(
    source: &str,
    cell_index: usize,
    table: &mut CallableTable,
) -> Result<CellDefUse, ParseFailure> {
    let (_, annotations) = strip_magics(source);
    let suite = compile_source(source, cell_index)?;
    let mut visitor = defuse::CellVisitor::new(table);
    visitor.visit_body(&suite);
    Ok(CellDefUse::from_scan(cell_index, visitor.finish(), annotations))
}

/// Def/use sets of a single cell analysed in isolation.
pub fn def_use(cell_source: &str) -> Result<CellDefUse, ParseFailure> {
    scan_cell(cell_source, 0, &mut CallableTable::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NotebookDefUse {
    pub cells: Vec<CellDefUse>,
    /// Names defined after each cell, cumulative over the prefix.
    pub prefix_defs: Vec<BTreeSet<String>>,
    /// Notebook cell index of the first wildcard import, if any.
    pub wildcard_from: Option<usize>,
}

impl NotebookDefUse {
    fn position(&self, cell_index: usize) -> Option<usize> {
        self.cells.iter().position(|c| c.cell_index == cell_index)
    }

    /// Names defined by cells strictly before `cell_index`.
    pub fn defined_before(&self, cell_index: usize) -> BTreeSet<String> {
        let p = self.cells.iter().take_while(|c| c.cell_index < cell_index).count();
        match p {
            0 => BTreeSet::new(),
            p => self.prefix_defs[p - 1].clone(),
        }
    }

    pub fn poisoned_at(&self, cell_index: usize) -> bool {
        self.wildcard_from.is_some_and(|w| w < cell_index)
    }

    /// Uses of the cell that nothing before it (nor the builtins) defines.
    pub fn undefined_names(&self, cell_index: usize) -> Vec<String> {
        let Some(pos) = self.position(cell_index) else {
            return Vec::new();
        };
        if self.poisoned_at(cell_index) {
            return Vec::new();
        }
        let before = self.defined_before(cell_index);
        let cell = &self.cells[pos];
        cell.uses
            .iter()
            .filter(|n| {
                cell.loaded_after_delete.contains(*n) || (!before.contains(*n) && !is_builtin(n))
            })
            .cloned()
            .collect()
    }

    /// First `(cell index, name)` predicted to raise NameError under linear execution.
    pub fn first_undefined(&self) -> Option<(usize, String)> {
        self.cells.iter().find_map(|c| {
            self.undefined_names(c.cell_index)
                .into_iter()
                .next()
                .map(|n| (c.cell_index, n))
        })
    }

    /// Debug dump: per-cell `defs` (name → kind) and `uses`.
    pub fn to_json(&self) -> serde_json::Value {
        let cells: Vec<serde_json::Value> = self
            .cells
            .iter()
            .map(|c| {
                let defs: BTreeMap<&str, DefKind> =
                    c.defs.iter().map(|(k, v)| (k.as_str(), *v)).collect();
                serde_json::json!({
                    "cell": c.cell_index,
                    "defs": defs,
                    "uses": c.uses.iter().collect::<Vec<_>>(),
                    "wildcard": c.wildcard,
                    "magics": c.annotations,
                })
            })
            .collect();
        serde_json::json!({ "cells": cells, "wildcard_from": self.wildcard_from })
    }
}

pub fn notebook_def_use(nb: &Notebook) -> Result<NotebookDefUse, ParseFailure> {
    let mut table = CallableTable::default();
    let mut cells = Vec::new();
    let mut prefix_defs = Vec::new();
    let mut running: BTreeSet<String> = BTreeSet::new();
    let mut wildcard_from = None;
    for cell in code_cells(nb) {
        let du = scan_cell(&cell.source, cell.index, &mut table)?;
        for d in &du.deleted {
            running.remove(d);
        }
        running.extend(du.defs.keys().filter(|k| k.as_str() != WILDCARD).cloned());
        if du.wildcard && wildcard_from.is_none() {
            wildcard_from = Some(cell.index);
        }
        prefix_defs.push(running.clone());
        cells.push(du);
    }
    Ok(NotebookDefUse {
        cells,
        prefix_defs,
        wildcard_from,
    })
}

/// Like [`notebook_def_use`] but cells that fail to compile contribute empty sets.
fn lenient_def_use(nb: &Notebook) -> NotebookDefUse {
    let mut table = CallableTable::default();
    let mut cells = Vec::new();
    let mut prefix_defs = Vec::new();
    let mut running: BTreeSet<String> = BTreeSet::new();
    let mut wildcard_from = None;
    for cell in code_cells(nb) {
        let du = scan_cell(&cell.source, cell.index, &mut table).unwrap_or_else(|_| {
            CellDefUse::from_scan(cell.index, CellScan::default(), Vec::new())
        });
        for d in &du.deleted {
            running.remove(d);
        }
        running.extend(du.defs.keys().filter(|k| k.as_str() != WILDCARD).cloned());
        if du.wildcard && wildcard_from.is_none() {
            wildcard_from = Some(cell.index);
        }
        prefix_defs.push(running.clone());
        cells.push(du);
    }
    NotebookDefUse {
        cells,
        prefix_defs,
        wildcard_from,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefinitionVerdict {
    DefinedBefore,
    DefinedAfterUse,
    Undefined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefinitionLocation {
    pub verdict: DefinitionVerdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub def_cell: Option<usize>,
}

impl DefinitionLocation {
    pub fn describe(&self) -> String {
        match (self.verdict, self.def_cell) {
            (DefinitionVerdict::DefinedAfterUse, Some(c)) => {
                format!("defined after use, in cell {c}")
            }
            (DefinitionVerdict::DefinedBefore, _) => {
                "defined in an earlier cell but missing at runtime".into()
            }
            _ => "not defined anywhere in the notebook".into(),
        }
    }
}

/// Searches the notebook for a definition of `name`, reported undefined at `error_cell`.
pub fn locate_definition(nb: &Notebook, name: &str, error_cell: usize) -> DefinitionLocation {
    let du = lenient_def_use(nb);
    if let Some(later) = du
        .cells
        .iter()
        .filter(|c| c.cell_index > error_cell)
        .find(|c| c.defines(name))
    {
        return DefinitionLocation {
            verdict: DefinitionVerdict::DefinedAfterUse,
            def_cell: Some(later.cell_index),
        };
    }
    if du.defined_before(error_cell).contains(name) {
        tracing::warn!(name, error_cell, "static defs contradict runtime NameError");
        return DefinitionLocation {
            verdict: DefinitionVerdict::DefinedBefore,
            def_cell: None,
        };
    }
    DefinitionLocation {
        verdict: DefinitionVerdict::Undefined,
        def_cell: None,
    }
}

/// Top-level modules imported by a source snippet, in order of appearance.
pub fn imported_modules(source: &str) -> Vec<String> {
    let Ok(suite) = compile_source(source, 0) else {
        return Vec::new();
    };
    let mut out = IndexSet::new();
    fn walk(stmts: &[ast::Stmt], out: &mut IndexSet<String>) {
        for s in stmts {
            match s {
                ast::Stmt::Import(i) => {
                    for a in &i.names {
                        if let Some(top) = a.name.split('.').next() {
                            out.insert(top.to_string());
                        }
                    }
                }
                ast::Stmt::ImportFrom(i) => {
                    let relative = i.level.is_some_and(|l| l.to_u32() > 0);
                    if let (false, Some(m)) = (relative, &i.module) {
                        if let Some(top) = m.split('.').next() {
                            out.insert(top.to_string());
                        }
                    }
                }
                ast::Stmt::FunctionDef(f) => walk(&f.body, out),
                ast::Stmt::AsyncFunctionDef(f) => walk(&f.body, out),
                ast::Stmt::ClassDef(c) => walk(&c.body, out),
                ast::Stmt::If(i) => {
                    walk(&i.body, out);
                    walk(&i.orelse, out);
                }
                ast::Stmt::Try(t) => {
                    walk(&t.body, out);
                    walk(&t.orelse, out);
                    walk(&t.finalbody, out);
                }
                _ => {}
            }
        }
    }
    walk(&suite, &mut out);
    out.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::notebook::CellKind;

    fn nb(cells: &[&str]) -> Notebook {
        let cells: Vec<(CellKind, &str)> = cells.iter().map(|s| (CellKind::Code, *s)).collect();
        Notebook::from_cells("t.ipynb", &cells)
    }

    fn names<'a>(it: impl IntoIterator<Item = &'a String>) -> Vec<&'a str> {
        it.into_iter().map(String::as_str).collect()
    }

    #[test]
    fn malformed_def_is_syntax_error() {
        let r = check_compilable(&nb(&["x = 1", "def f(:\n    pass"]));
        assert!(!r.ok);
        assert_eq!(r.error_kind, Some(CompileErrorKind::Syntax));
        assert_eq!(r.location.unwrap().cell, 1);
    }

    #[test]
    fn misaligned_block_is_indentation_error() {
        for src in ["if True:\n    x = 1\n  y = 2\n", "def f():\nreturn 1\n", "  x = 1\n"] {
            let r = check_compilable(&nb(&[src]));
            assert_eq!(r.error_kind, Some(CompileErrorKind::Indentation), "{src:?}: {r:?}");
        }
    }

    #[test]
    fn valid_cells_compile() {
        let r = check_compilable(&nb(&["import os", "%matplotlib inline\nx = os.getcwd()"]));
        assert!(r.ok);
        assert!(r.location.is_none() && r.message.is_none());
    }

    #[test]
    fn later_cell_error_reports_its_index() {
        let r = check_compilable(&nb(&["a = 1", "b = 2", "c = (3"]));
        let loc = r.location.unwrap();
        assert_eq!(loc.cell, 2);
    }

    #[test]
    fn simple_assignment() {
        let d = def_use("x = 1").unwrap();
        assert_eq!(d.defs.get("x"), Some(&DefKind::Variable));
        assert!(d.uses.is_empty());
        let d = def_use("y = x + 1").unwrap();
        assert_eq!(names(d.defs.keys()), ["y"]);
        assert_eq!(names(&d.uses), ["x"]);
    }

    #[test]
    fn import_forms() {
        let d = def_use("import a.b\nimport c.d as e\nfrom m import x as y\nfrom n import z").unwrap();
        assert_eq!(names(d.defs.keys()), ["a", "e", "y", "z"]);
        assert!(d.defs.values().all(|k| *k == DefKind::Import));
    }

    #[test]
    fn alias_import_across_cells() {
        let du = notebook_def_use(&nb(&["import pandas as pd", "df = pd.read_csv(p)"])).unwrap();
        assert_eq!(du.cells[0].defs.get("pd"), Some(&DefKind::Import));
        assert_eq!(names(du.cells[1].defs.keys()), ["df"]);
        assert_eq!(names(&du.cells[1].uses), ["pd", "p"]);
        assert_eq!(du.first_undefined(), Some((1, "p".to_string())));
    }

    #[test]
    fn comprehension_variables_do_not_leak() {
        let d = def_use("ys = [i * k for i in xs if i]").unwrap();
        assert!(!d.defs.contains_key("i"));
        assert_eq!(names(&d.uses), ["xs", "k"]);
    }

    #[test]
    fn del_removes_definition() {
        let d = def_use("x = 1\ndel x\ny = x").unwrap();
        assert!(!d.defs.contains_key("x"));
        assert!(d.uses.contains("x"));
        assert!(d.loaded_after_delete.contains("x"));
        let du = notebook_def_use(&nb(&["x = 1", "del x", "print(x)"])).unwrap();
        assert!(!du.prefix_defs[1].contains("x"));
        assert_eq!(du.first_undefined(), Some((2, "x".to_string())));
    }

    #[test]
    fn augmented_assignment_uses_and_defines() {
        let d = def_use("total += 1").unwrap();
        assert!(d.uses.contains("total"));
        assert!(d.defs.contains_key("total"));
    }

    #[test]
    fn walrus_annotated_and_unpacking() {
        let d = def_use("(n := 10)\nz: int = 3\na, *b = [1, 2]\nw: str").unwrap();
        assert_eq!(names(d.defs.keys()), ["n", "z", "a", "b"]);
        assert_eq!(names(&d.uses), ["int", "str"]);
    }

    #[test]
    fn loop_with_and_handler_targets() {
        let d = def_use(
            "for i in range(3):\n    pass\nwith open(p) as fh:\n    pass\ntry:\n    pass\nexcept ValueError as err:\n    print(err)\n",
        )
        .unwrap();
        assert_eq!(d.defs.get("i"), Some(&DefKind::LoopTarget));
        assert_eq!(d.defs.get("fh"), Some(&DefKind::WithTarget));
        assert!(!d.defs.contains_key("err"));
        assert!(!d.uses.contains("err"));
    }

    #[test]
    fn function_body_uses_charged_to_call_site() {
        let du = notebook_def_use(&nb(&["def f():\n    return g + 1", "g = 2", "f()"])).unwrap();
        assert!(du.cells[0].uses.is_empty());
        assert_eq!(du.cells[0].defs.get("f"), Some(&DefKind::Function));
        assert!(du.cells[2].uses.contains("g"));
        assert_eq!(du.first_undefined(), None);

        let early = notebook_def_use(&nb(&["def f():\n    return g + 1", "f()", "g = 2"])).unwrap();
        assert_eq!(early.first_undefined(), Some((1, "g".to_string())));
    }

    #[test]
    fn function_locals_and_params_are_not_free() {
        let d = def_use("def f(a, b=c):\n    d = a + b\n    return d + e\nf(1)").unwrap();
        assert_eq!(names(&d.uses), ["c", "e"]);
    }

    #[test]
    fn global_declaration_promotes_assignment() {
        let d = def_use("def setup():\n    global cfg\n    cfg = 1\nsetup()").unwrap();
        assert_eq!(d.defs.get("cfg"), Some(&DefKind::ParamScoped));
        let d = def_use("def setup():\n    global cfg\n    cfg = 1").unwrap();
        assert_eq!(d.defs.get("cfg"), None);
    }

    #[test]
    fn class_body_names_stay_in_class() {
        let d = def_use("class A(Base):\n    k = 1\n    j = k + m\n    def f(self):\n        return q\nA()").unwrap();
        assert_eq!(names(d.defs.keys()), ["A"]);
        assert_eq!(names(&d.uses), ["Base", "m", "q"]);
    }

    #[test]
    fn wildcard_poisons_later_cells() {
        let du = notebook_def_use(&nb(&["x = 1", "from os import *", "print(getcwd())"])).unwrap();
        assert_eq!(du.wildcard_from, Some(1));
        assert!(du.cells[1].wildcard);
        assert_eq!(du.cells[1].defs.get(WILDCARD), Some(&DefKind::WildcardImport));
        assert!(du.undefined_names(2).is_empty());
        assert_eq!(du.first_undefined(), None);
    }

    #[test]
    fn prefix_sets_accumulate() {
        let du = notebook_def_use(&nb(&["a=1", "b=a"])).unwrap();
        let p: Vec<Vec<&str>> = du.prefix_defs.iter().map(names).collect();
        assert_eq!(p, [vec!["a"], vec!["a", "b"]]);
    }

    #[test]
    fn parse_failure_names_cell() {
        let err = notebook_def_use(&nb(&["a = 1", "b = (", "c"])).unwrap_err();
        assert_eq!(err.cell, 1);
    }

    #[test]
    fn builtins_are_never_undefined() {
        let du = notebook_def_use(&nb(&["print(len([1]))", "display(sorted({}))"])).unwrap();
        assert_eq!(du.first_undefined(), None);
    }

    #[test]
    fn locate_undefined_function() {
        let n = nb(&["import numpy as np", "a = 1", "p = softmax(a)"]);
        let loc = locate_definition(&n, "softmax", 2);
        assert_eq!(loc.verdict, DefinitionVerdict::Undefined);
        assert_eq!(loc.def_cell, None);
    }

    #[test]
    fn locate_defined_after_use_picks_earliest() {
        let n = nb(&["a = 1", "b = 2", "y = x * 2", "c = 3", "d = 4", "x = 5", "x = 6"]);
        let loc = locate_definition(&n, "x", 2);
        assert_eq!(loc.verdict, DefinitionVerdict::DefinedAfterUse);
        assert_eq!(loc.def_cell, Some(5));
    }

    #[test]
    fn locate_reports_state_desync_as_defined_before() {
        let n = nb(&["a = 1", "x = 1", "b = 2", "c = 3", "print(x)"]);
        let loc = locate_definition(&n, "x", 4);
        assert_eq!(loc.verdict, DefinitionVerdict::DefinedBefore);
        assert!(loc.def_cell.is_none());
    }

    #[test]
    fn imported_modules_lists_top_levels() {
        let m = imported_modules("import tensorflow as tf\nfrom sklearn.metrics import f1\nfrom . import x\ndef f():\n    import numpy\n");
        assert_eq!(m, ["tensorflow", "sklearn", "numpy"]);
        assert!(is_stdlib_module("os") && !is_stdlib_module("numpy"));
    }

    #[test]
    fn json_dump_lists_defs_by_kind() {
        let du = notebook_def_use(&nb(&["import os\nx = 1"])).unwrap();
        let v = du.to_json();
        assert_eq!(v["cells"][0]["defs"]["os"], "import");
        assert_eq!(v["cells"][0]["defs"]["x"], "variable");
    }
}
