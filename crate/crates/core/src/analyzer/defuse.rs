//! Scope-aware def/use extraction over one cell's module-level code.
//!
//! Module-level statements run immediately, so their loads are cell uses.
//! Function and lambda bodies are deferred: their free global names are kept
//! in a [`CallableTable`] and charged to whichever cell calls them.

use std::collections::{HashMap, HashSet};

use indexmap::{IndexMap, IndexSet};
use rustpython_parser::ast::{self, Expr, ExprContext, Pattern, Stmt};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefKind {
    Variable,
    Function,
    Class,
    Import,
    LoopTarget,
    WithTarget,
    /// Assigned inside a function body under a `global` declaration.
    ParamScoped,
    WildcardImport,
}

/// Key recorded in `defs` for `from m import *`.
pub const WILDCARD: &str = "*";

/// Free global names of callables known so far, keyed by binding name.
#[derive(Debug, Clone, Default)]
pub struct CallableTable {
    frees: HashMap<String, Vec<String>>,
    /// Module names a function binds through `global` once it runs.
    globals: HashMap<String, Vec<String>>,
}

impl CallableTable {
    pub fn free_names(&self, name: &str) -> Option<&[String]> {
        self.frees.get(name).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CellScan {
    pub defs: IndexMap<String, DefKind>,
    pub uses: IndexSet<String>,
    /// Names removed by `del` and not rebound later in the cell.
    pub deleted: IndexSet<String>,
    /// Names loaded after the cell itself deleted them.
    pub loaded_after_delete: IndexSet<String>,
    pub wildcard: bool,
}

enum Scope {
    Class(HashSet<String>),
    Comprehension(HashSet<String>),
}

pub(crate) struct CellVisitor<'t> {
    table: &'t mut CallableTable,
    scan: CellScan,
    defined_now: HashSet<String>,
    scopes: Vec<Scope>,
    /// Method free names gathered while inside a class body.
    class_frees: Vec<IndexSet<String>>,
}

impl<'t> CellVisitor<'t> {
    pub(crate) fn new(table: &'t mut CallableTable) -> Self {
        CellVisitor {
            table,
            scan: CellScan::default(),
            defined_now: HashSet::new(),
            scopes: Vec::new(),
            class_frees: Vec::new(),
        }
    }

    pub(crate) fn finish(self) -> CellScan {
        self.scan
    }

    fn at_module(&self) -> bool {
        self.scopes.is_empty()
    }

    fn load(&mut self, name: &str) {
        for (depth, scope) in self.scopes.iter().rev().enumerate() {
            match scope {
                Scope::Comprehension(bound) if bound.contains(name) => return,
                // class bindings are invisible to scopes nested in the class body
                Scope::Class(bound) => {
                    if depth == 0 && bound.contains(name) {
                        return;
                    }
                    break;
                }
                _ => {}
            }
        }
        if self.defined_now.contains(name) {
            return;
        }
        if self.scan.deleted.contains(name) {
            self.scan.loaded_after_delete.insert(name.to_string());
        }
        self.scan.uses.insert(name.to_string());
    }

    fn define(&mut self, name: &str, kind: DefKind) {
        match self.scopes.last_mut() {
            Some(Scope::Class(bound)) | Some(Scope::Comprehension(bound)) => {
                bound.insert(name.to_string());
            }
            None => self.define_module(name, kind),
        }
    }

    fn define_module(&mut self, name: &str, kind: DefKind) {
        self.defined_now.insert(name.to_string());
        self.scan.deleted.shift_remove(name);
        self.scan.defs.shift_remove(name);
        self.scan.defs.insert(name.to_string(), kind);
        if kind != DefKind::Function && kind != DefKind::Class {
            self.table.frees.remove(name);
            self.table.globals.remove(name);
        }
    }

    /// Walrus targets bind in the nearest enclosing non-comprehension scope.
    fn define_walrus(&mut self, name: &str) {
        for scope in self.scopes.iter_mut().rev() {
            if let Scope::Class(bound) = scope {
                bound.insert(name.to_string());
                return;
            }
        }
        self.define_module(name, DefKind::Variable);
    }

    fn delete(&mut self, name: &str) {
        self.load(name);
        match self.scopes.last_mut() {
            Some(Scope::Class(bound)) | Some(Scope::Comprehension(bound)) => {
                bound.remove(name);
            }
            None => {
                self.defined_now.remove(name);
                self.scan.defs.shift_remove(name);
                self.scan.deleted.insert(name.to_string());
                self.table.frees.remove(name);
                self.table.globals.remove(name);
            }
        }
    }

    /// Charges the transitive free names of a called callable to this cell,
    /// then binds whatever the callees declare `global`.
    fn charge_call(&mut self, callee: &str) {
        let mut seen: HashSet<String> = HashSet::new();
        seen.insert(callee.to_string());
        let mut stack = vec![callee.to_string()];
        let mut promoted = Vec::new();
        while let Some(f) = stack.pop() {
            if let Some(g) = self.table.globals.get(&f) {
                promoted.extend(g.iter().cloned());
            }
            let Some(frees) = self.table.frees.get(&f).cloned() else {
                continue;
            };
            for n in frees {
                if seen.insert(n.clone()) {
                    self.load(&n);
                    stack.push(n);
                }
            }
        }
        for g in promoted {
            self.define_module(&g, DefKind::ParamScoped);
        }
    }

    pub(crate) fn visit_body(&mut self, body: &[Stmt]) {
        for stmt in body {
            self.visit_stmt(stmt);
        }
    }

    fn visit_stmt(&mut self, stmt: &Stmt) {
        match stmt {
            Stmt::FunctionDef(f) => self.visit_function(
                &f.name,
                &f.args,
                &f.body,
                &f.decorator_list,
                f.returns.as_deref(),
            ),
            Stmt::AsyncFunctionDef(f) => self.visit_function(
                &f.name,
                &f.args,
                &f.body,
                &f.decorator_list,
                f.returns.as_deref(),
            ),
            Stmt::ClassDef(c) => {
                for d in &c.decorator_list {
                    self.visit_expr(d);
                }
                for b in &c.bases {
                    self.visit_expr(b);
                }
                for k in &c.keywords {
                    self.visit_expr(&k.value);
                }
                self.scopes.push(Scope::Class(HashSet::new()));
                self.class_frees.push(IndexSet::new());
                self.visit_body(&c.body);
                self.scopes.pop();
                let frees = self.class_frees.pop().unwrap_or_default();
                self.define(&c.name, DefKind::Class);
                if self.at_module() {
                    self.table
                        .frees
                        .insert(c.name.to_string(), frees.into_iter().collect());
                }
            }
            Stmt::Return(r) => {
                if let Some(v) = &r.value {
                    self.visit_expr(v);
                }
            }
            Stmt::Delete(d) => {
                for t in &d.targets {
                    self.visit_delete_target(t);
                }
            }
            Stmt::Assign(a) => {
                self.visit_expr(&a.value);
                for t in &a.targets {
                    self.visit_target(t, DefKind::Variable);
                }
                if let (Expr::Lambda(l), [Expr::Name(n)]) = (a.value.as_ref(), a.targets.as_slice()) {
                    if self.at_module() {
                        let frees = function_free_names(&l.args, std::slice::from_ref(&Stmt::Expr(
                            ast::StmtExpr {
                                range: l.range,
                                value: l.body.clone(),
                            },
                        )));
                        self.table.frees.insert(n.id.to_string(), frees.free);
                    }
                }
            }
            Stmt::TypeAlias(t) => {
                self.visit_expr(&t.value);
                self.visit_target(&t.name, DefKind::Variable);
            }
            Stmt::AugAssign(a) => {
                self.visit_aug_target_load(&a.target);
                self.visit_expr(&a.value);
                self.visit_target(&a.target, DefKind::Variable);
            }
            Stmt::AnnAssign(a) => {
                if self.at_module() || matches!(self.scopes.last(), Some(Scope::Class(_))) {
                    self.visit_expr(&a.annotation);
                }
                if let Some(v) = &a.value {
                    self.visit_expr(v);
                    self.visit_target(&a.target, DefKind::Variable);
                } else if !matches!(a.target.as_ref(), Expr::Name(_)) {
                    self.visit_target_loads(&a.target);
                }
            }
            Stmt::For(f) => {
                self.visit_expr(&f.iter);
                self.visit_target(&f.target, DefKind::LoopTarget);
                self.visit_body(&f.body);
                self.visit_body(&f.orelse);
            }
            Stmt::AsyncFor(f) => {
                self.visit_expr(&f.iter);
                self.visit_target(&f.target, DefKind::LoopTarget);
                self.visit_body(&f.body);
                self.visit_body(&f.orelse);
            }
            Stmt::While(w) => {
                self.visit_expr(&w.test);
                self.visit_body(&w.body);
                self.visit_body(&w.orelse);
            }
            Stmt::If(i) => {
                self.visit_expr(&i.test);
                self.visit_body(&i.body);
                self.visit_body(&i.orelse);
            }
            Stmt::With(w) => {
                for item in &w.items {
                    self.visit_expr(&item.context_expr);
                    if let Some(v) = &item.optional_vars {
                        self.visit_target(v, DefKind::WithTarget);
                    }
                }
                self.visit_body(&w.body);
            }
            Stmt::AsyncWith(w) => {
                for item in &w.items {
                    self.visit_expr(&item.context_expr);
                    if let Some(v) = &item.optional_vars {
                        self.visit_target(v, DefKind::WithTarget);
                    }
                }
                self.visit_body(&w.body);
            }
            Stmt::Match(m) => {
                self.visit_expr(&m.subject);
                for case in &m.cases {
                    self.visit_pattern(&case.pattern);
                    if let Some(g) = &case.guard {
                        self.visit_expr(g);
                    }
                    self.visit_body(&case.body);
                }
            }
            Stmt::Raise(r) => {
                if let Some(e) = &r.exc {
                    self.visit_expr(e);
                }
                if let Some(c) = &r.cause {
                    self.visit_expr(c);
                }
            }
            Stmt::Try(t) => self.visit_try(&t.body, &t.handlers, &t.orelse, &t.finalbody),
            Stmt::TryStar(t) => self.visit_try(&t.body, &t.handlers, &t.orelse, &t.finalbody),
            Stmt::Assert(a) => {
                self.visit_expr(&a.test);
                if let Some(m) = &a.msg {
                    self.visit_expr(m);
                }
            }
            Stmt::Import(i) => {
                for alias in &i.names {
                    let bound = match &alias.asname {
                        Some(a) => a.to_string(),
                        None => alias.name.split('.').next().unwrap_or_default().to_string(),
                    };
                    self.define(&bound, DefKind::Import);
                }
            }
            Stmt::ImportFrom(i) => {
                for alias in &i.names {
                    if alias.name.as_str() == WILDCARD {
                        if self.at_module() {
                            self.scan.wildcard = true;
                            self.scan.defs.insert(WILDCARD.into(), DefKind::WildcardImport);
                        }
                        continue;
                    }
                    let bound = alias.asname.as_ref().unwrap_or(&alias.name).to_string();
                    self.define(&bound, DefKind::Import);
                }
            }
            Stmt::Global(_) | Stmt::Nonlocal(_) => {}
            Stmt::Expr(e) => self.visit_expr(&e.value),
            Stmt::Pass(_) | Stmt::Break(_) | Stmt::Continue(_) => {}
        }
    }

    fn visit_try(
        &mut self,
        body: &[Stmt],
        handlers: &[ast::ExceptHandler],
        orelse: &[Stmt],
        finalbody: &[Stmt],
    ) {
        self.visit_body(body);
        for ast::ExceptHandler::ExceptHandler(h) in handlers {
            if let Some(t) = &h.type_ {
                self.visit_expr(t);
            }
            match &h.name {
                Some(name) if self.at_module() => {
                    let prior = self.scan.defs.get(name.as_str()).copied();
                    let was_defined = self.defined_now.contains(name.as_str());
                    self.define_module(name, DefKind::Variable);
                    self.visit_body(&h.body);
                    // The handler name is unbound again when the handler exits.
                    if was_defined {
                        if let Some(kind) = prior {
                            self.scan.defs.insert(name.to_string(), kind);
                        }
                    } else {
                        self.defined_now.remove(name.as_str());
                        self.scan.defs.shift_remove(name.as_str());
                    }
                }
                Some(name) => {
                    self.define(name, DefKind::Variable);
                    self.visit_body(&h.body);
                }
                None => self.visit_body(&h.body),
            }
        }
        self.visit_body(orelse);
        self.visit_body(finalbody);
    }

    fn visit_function(
        &mut self,
        name: &ast::Identifier,
        args: &ast::Arguments,
        body: &[Stmt],
        decorators: &[Expr],
        returns: Option<&Expr>,
    ) {
        for d in decorators {
            self.visit_expr(d);
        }
        self.visit_arguments_eager(args);
        if let Some(r) = returns {
            self.visit_expr(r);
        }
        let scope = function_free_names(args, body);
        self.define(name, DefKind::Function);
        match self.scopes.last() {
            None => {
                self.table.frees.insert(name.to_string(), scope.free.clone());
                self.table.globals.insert(name.to_string(), scope.promoted_globals.clone());
            }
            Some(Scope::Class(_)) => {
                if let Some(acc) = self.class_frees.last_mut() {
                    acc.extend(scope.free.iter().cloned());
                }
                for g in &scope.promoted_globals {
                    self.define_module(g, DefKind::ParamScoped);
                }
            }
            Some(Scope::Comprehension(_)) => {}
        }
    }

    /// Defaults and annotations are evaluated when the `def` runs.
    fn visit_arguments_eager(&mut self, args: &ast::Arguments) {
        for a in args.posonlyargs.iter().chain(&args.args).chain(&args.kwonlyargs) {
            if let Some(d) = &a.default {
                self.visit_expr(d);
            }
            if let Some(ann) = &a.def.annotation {
                self.visit_expr(ann);
            }
        }
        for a in args.vararg.iter().chain(args.kwarg.iter()) {
            if let Some(ann) = &a.annotation {
                self.visit_expr(ann);
            }
        }
    }

    fn visit_target(&mut self, target: &Expr, kind: DefKind) {
        match target {
            Expr::Name(n) => self.define(&n.id, kind),
            Expr::Tuple(t) => {
                for e in &t.elts {
                    self.visit_target(e, kind);
                }
            }
            Expr::List(l) => {
                for e in &l.elts {
                    self.visit_target(e, kind);
                }
            }
            Expr::Starred(s) => self.visit_target(&s.value, kind),
            Expr::Attribute(a) => self.visit_expr(&a.value),
            Expr::Subscript(s) => {
                self.visit_expr(&s.value);
                self.visit_expr(&s.slice);
            }
            other => self.visit_expr(other),
        }
    }

    fn visit_target_loads(&mut self, target: &Expr) {
        match target {
            Expr::Attribute(a) => self.visit_expr(&a.value),
            Expr::Subscript(s) => {
                self.visit_expr(&s.value);
                self.visit_expr(&s.slice);
            }
            _ => {}
        }
    }

    fn visit_aug_target_load(&mut self, target: &Expr) {
        match target {
            Expr::Name(n) => self.load(&n.id),
            other => self.visit_target_loads(other),
        }
    }

    fn visit_delete_target(&mut self, target: &Expr) {
        match target {
            Expr::Name(n) => self.delete(&n.id),
            Expr::Tuple(t) => {
                for e in &t.elts {
                    self.visit_delete_target(e);
                }
            }
            Expr::List(l) => {
                for e in &l.elts {
                    self.visit_delete_target(e);
                }
            }
            other => self.visit_target_loads(other),
        }
    }

    fn visit_pattern(&mut self, pattern: &Pattern) {
        match pattern {
            Pattern::MatchValue(v) => self.visit_expr(&v.value),
            Pattern::MatchSingleton(_) => {}
            Pattern::MatchSequence(s) => {
                for p in &s.patterns {
                    self.visit_pattern(p);
                }
            }
            Pattern::MatchMapping(m) => {
                for k in &m.keys {
                    self.visit_expr(k);
                }
                for p in &m.patterns {
                    self.visit_pattern(p);
                }
                if let Some(r) = &m.rest {
                    self.define(r, DefKind::Variable);
                }
            }
            Pattern::MatchClass(c) => {
                self.visit_expr(&c.cls);
                for p in c.patterns.iter().chain(&c.kwd_patterns) {
                    self.visit_pattern(p);
                }
            }
            Pattern::MatchStar(s) => {
                if let Some(n) = &s.name {
                    self.define(n, DefKind::Variable);
                }
            }
            Pattern::MatchAs(a) => {
                if let Some(p) = &a.pattern {
                    self.visit_pattern(p);
                }
                if let Some(n) = &a.name {
                    self.define(n, DefKind::Variable);
                }
            }
            Pattern::MatchOr(o) => {
                for p in &o.patterns {
                    self.visit_pattern(p);
                }
            }
        }
    }

    fn visit_comprehension(&mut self, generators: &[ast::Comprehension], elts: &[&Expr]) {
        let Some(first) = generators.first() else {
            return;
        };
        self.visit_expr(&first.iter);
        self.scopes.push(Scope::Comprehension(HashSet::new()));
        for (i, g) in generators.iter().enumerate() {
            if i > 0 {
                self.visit_expr(&g.iter);
            }
            self.bind_comprehension_target(&g.target);
            for cond in &g.ifs {
                self.visit_expr(cond);
            }
        }
        for e in elts {
            self.visit_expr(e);
        }
        self.scopes.pop();
    }

    fn bind_comprehension_target(&mut self, target: &Expr) {
        let mut names = IndexSet::new();
        collect_target_names(target, &mut names);
        if let Some(Scope::Comprehension(bound)) = self.scopes.last_mut() {
            bound.extend(names);
        }
        self.visit_target_loads(target);
    }

    fn visit_expr(&mut self, expr: &Expr) {
        match expr {
            Expr::BoolOp(b) => {
                for v in &b.values {
                    self.visit_expr(v);
                }
            }
            Expr::NamedExpr(n) => {
                self.visit_expr(&n.value);
                if let Expr::Name(t) = n.target.as_ref() {
                    self.define_walrus(&t.id);
                }
            }
            Expr::BinOp(b) => {
                self.visit_expr(&b.left);
                self.visit_expr(&b.right);
            }
            Expr::UnaryOp(u) => self.visit_expr(&u.operand),
            Expr::Lambda(l) => {
                self.visit_arguments_eager(&l.args);
            }
            Expr::IfExp(i) => {
                self.visit_expr(&i.test);
                self.visit_expr(&i.body);
                self.visit_expr(&i.orelse);
            }
            Expr::Dict(d) => {
                for (k, v) in d.keys.iter().zip(&d.values) {
                    if let Some(k) = k {
                        self.visit_expr(k);
                    }
                    self.visit_expr(v);
                }
            }
            Expr::Set(s) => {
                for e in &s.elts {
                    self.visit_expr(e);
                }
            }
            Expr::ListComp(c) => self.visit_comprehension(&c.generators, &[&c.elt]),
            Expr::SetComp(c) => self.visit_comprehension(&c.generators, &[&c.elt]),
            Expr::GeneratorExp(c) => self.visit_comprehension(&c.generators, &[&c.elt]),
            Expr::DictComp(c) => self.visit_comprehension(&c.generators, &[&c.key, &c.value]),
            Expr::Await(a) => self.visit_expr(&a.value),
            Expr::Yield(y) => {
                if let Some(v) = &y.value {
                    self.visit_expr(v);
                }
            }
            Expr::YieldFrom(y) => self.visit_expr(&y.value),
            Expr::Compare(c) => {
                self.visit_expr(&c.left);
                for e in &c.comparators {
                    self.visit_expr(e);
                }
            }
            Expr::Call(c) => {
                self.visit_expr(&c.func);
                for a in &c.args {
                    self.visit_expr(a);
                }
                for k in &c.keywords {
                    self.visit_expr(&k.value);
                }
                if let Expr::Name(n) = c.func.as_ref() {
                    self.charge_call(&n.id);
                }
            }
            Expr::FormattedValue(f) => {
                self.visit_expr(&f.value);
                if let Some(spec) = &f.format_spec {
                    self.visit_expr(spec);
                }
            }
            Expr::JoinedStr(j) => {
                for v in &j.values {
                    self.visit_expr(v);
                }
            }
            Expr::Constant(_) => {}
            Expr::Attribute(a) => self.visit_expr(&a.value),
            Expr::Subscript(s) => {
                self.visit_expr(&s.value);
                self.visit_expr(&s.slice);
            }
            Expr::Starred(s) => self.visit_expr(&s.value),
            Expr::Name(n) => match n.ctx {
                ExprContext::Load => self.load(&n.id),
                ExprContext::Store => self.define(&n.id, DefKind::Variable),
                ExprContext::Del => self.delete(&n.id),
            },
            Expr::List(l) => {
                for e in &l.elts {
                    self.visit_expr(e);
                }
            }
            Expr::Tuple(t) => {
                for e in &t.elts {
                    self.visit_expr(e);
                }
            }
            Expr::Slice(s) => {
                for part in [&s.lower, &s.upper, &s.step].into_iter().flatten() {
                    self.visit_expr(part);
                }
            }
        }
    }
}

fn collect_target_names(target: &Expr, out: &mut IndexSet<String>) {
    match target {
        Expr::Name(n) => {
            out.insert(n.id.to_string());
        }
        Expr::Tuple(t) => t.elts.iter().for_each(|e| collect_target_names(e, out)),
        Expr::List(l) => l.elts.iter().for_each(|e| collect_target_names(e, out)),
        Expr::Starred(s) => collect_target_names(&s.value, out),
        _ => {}
    }
}

/// Result of analysing a deferred (function or lambda) scope.
#[derive(Debug, Default)]
pub(crate) struct FunctionScope {
    /// Names resolved in the global namespace when the body runs.
    pub free: Vec<String>,
    /// Globals assigned by the body under a `global` declaration.
    pub promoted_globals: Vec<String>,
}

pub(crate) fn function_free_names(args: &ast::Arguments, body: &[Stmt]) -> FunctionScope {
    let mut bound = IndexSet::new();
    for a in args.posonlyargs.iter().chain(&args.args).chain(&args.kwonlyargs) {
        bound.insert(a.def.arg.to_string());
    }
    for a in args.vararg.iter().chain(args.kwarg.iter()) {
        bound.insert(a.arg.to_string());
    }
    let mut declared_global = IndexSet::new();
    let mut declared_nonlocal = IndexSet::new();
    let mut assigned = IndexSet::new();
    for s in body {
        collect_bindings(s, &mut assigned, &mut declared_global, &mut declared_nonlocal);
    }
    bound.extend(assigned.iter().cloned());
    let locals: HashSet<String> = bound
        .into_iter()
        .filter(|n| !declared_global.contains(n) && !declared_nonlocal.contains(n))
        .collect();

    let mut loads = IndexSet::new();
    let mut walker = LoadWalker {
        out: &mut loads,
        shadow: vec![],
    };
    for s in body {
        walker.stmt(s);
    }
    let free = loads
        .into_iter()
        .filter(|n| !locals.contains(n) && !declared_nonlocal.contains(n))
        .collect();
    let promoted_globals = assigned
        .into_iter()
        .filter(|n| declared_global.contains(n))
        .collect();
    FunctionScope {
        free,
        promoted_globals,
    }
}

/// Names bound in a function body, without entering nested scopes.
fn collect_bindings(
    stmt: &Stmt,
    out: &mut IndexSet<String>,
    globals: &mut IndexSet<String>,
    nonlocals: &mut IndexSet<String>,
) {
    let mut rec = |body: &[Stmt], out: &mut IndexSet<String>| {
        for s in body {
            collect_bindings(s, out, globals, nonlocals);
        }
    };
    match stmt {
        Stmt::FunctionDef(f) => {
            out.insert(f.name.to_string());
        }
        Stmt::AsyncFunctionDef(f) => {
            out.insert(f.name.to_string());
        }
        Stmt::ClassDef(c) => {
            out.insert(c.name.to_string());
        }
        Stmt::Assign(a) => {
            a.targets.iter().for_each(|t| collect_target_names(t, out));
            collect_walrus(&a.value, out);
        }
        Stmt::AugAssign(a) => {
            collect_target_names(&a.target, out);
            collect_walrus(&a.value, out);
        }
        Stmt::AnnAssign(a) => {
            if let Expr::Name(n) = a.target.as_ref() {
                out.insert(n.id.to_string());
            }
        }
        Stmt::Delete(d) => d.targets.iter().for_each(|t| collect_target_names(t, out)),
        Stmt::For(f) => {
            collect_target_names(&f.target, out);
            rec(&f.body, out);
            rec(&f.orelse, out);
        }
        Stmt::AsyncFor(f) => {
            collect_target_names(&f.target, out);
            rec(&f.body, out);
            rec(&f.orelse, out);
        }
        Stmt::While(w) => {
            collect_walrus(&w.test, out);
            rec(&w.body, out);
            rec(&w.orelse, out);
        }
        Stmt::If(i) => {
            collect_walrus(&i.test, out);
            rec(&i.body, out);
            rec(&i.orelse, out);
        }
        Stmt::With(w) => {
            for item in &w.items {
                if let Some(v) = &item.optional_vars {
                    collect_target_names(v, out);
                }
            }
            rec(&w.body, out);
        }
        Stmt::AsyncWith(w) => {
            for item in &w.items {
                if let Some(v) = &item.optional_vars {
                    collect_target_names(v, out);
                }
            }
            rec(&w.body, out);
        }
        Stmt::Match(m) => {
            for case in &m.cases {
                collect_pattern_names(&case.pattern, out);
                rec(&case.body, out);
            }
        }
        Stmt::Try(t) => {
            rec(&t.body, out);
            for ast::ExceptHandler::ExceptHandler(h) in &t.handlers {
                if let Some(n) = &h.name {
                    out.insert(n.to_string());
                }
                rec(&h.body, out);
            }
            rec(&t.orelse, out);
            rec(&t.finalbody, out);
        }
        Stmt::TryStar(t) => {
            rec(&t.body, out);
            for ast::ExceptHandler::ExceptHandler(h) in &t.handlers {
                if let Some(n) = &h.name {
                    out.insert(n.to_string());
                }
                rec(&h.body, out);
            }
            rec(&t.orelse, out);
            rec(&t.finalbody, out);
        }
        Stmt::Import(i) => {
            for alias in &i.names {
                let bound = match &alias.asname {
                    Some(a) => a.to_string(),
                    None => alias.name.split('.').next().unwrap_or_default().to_string(),
                };
                out.insert(bound);
            }
        }
        Stmt::ImportFrom(i) => {
            for alias in &i.names {
                if alias.name.as_str() != WILDCARD {
                    out.insert(alias.asname.as_ref().unwrap_or(&alias.name).to_string());
                }
            }
        }
        Stmt::Global(g) => globals.extend(g.names.iter().map(|n| n.to_string())),
        Stmt::Nonlocal(n) => nonlocals.extend(n.names.iter().map(|n| n.to_string())),
        Stmt::Expr(e) => collect_walrus(&e.value, out),
        Stmt::Return(r) => {
            if let Some(v) = &r.value {
                collect_walrus(v, out);
            }
        }
        _ => {}
    }
}

fn collect_pattern_names(p: &Pattern, out: &mut IndexSet<String>) {
    match p {
        Pattern::MatchAs(a) => {
            if let Some(n) = &a.name {
                out.insert(n.to_string());
            }
            if let Some(inner) = &a.pattern {
                collect_pattern_names(inner, out);
            }
        }
        Pattern::MatchStar(s) => {
            if let Some(n) = &s.name {
                out.insert(n.to_string());
            }
        }
        Pattern::MatchMapping(m) => {
            m.patterns.iter().for_each(|p| collect_pattern_names(p, out));
            if let Some(r) = &m.rest {
                out.insert(r.to_string());
            }
        }
        Pattern::MatchSequence(s) => s.patterns.iter().for_each(|p| collect_pattern_names(p, out)),
        Pattern::MatchClass(c) => c
            .patterns
            .iter()
            .chain(&c.kwd_patterns)
            .for_each(|p| collect_pattern_names(p, out)),
        Pattern::MatchOr(o) => o.patterns.iter().for_each(|p| collect_pattern_names(p, out)),
        Pattern::MatchValue(_) | Pattern::MatchSingleton(_) => {}
    }
}

/// Walrus targets in comprehensions bind in the function scope; shallow scan.
fn collect_walrus(expr: &Expr, out: &mut IndexSet<String>) {
    match expr {
        Expr::NamedExpr(n) => {
            collect_target_names(&n.target, out);
            collect_walrus(&n.value, out);
        }
        Expr::ListComp(c) => {
            collect_walrus(&c.elt, out);
            c.generators.iter().for_each(|g| g.ifs.iter().for_each(|e| collect_walrus(e, out)));
        }
        Expr::SetComp(c) => collect_walrus(&c.elt, out),
        Expr::GeneratorExp(c) => collect_walrus(&c.elt, out),
        Expr::Call(c) => {
            c.args.iter().for_each(|a| collect_walrus(a, out));
        }
        Expr::BoolOp(b) => b.values.iter().for_each(|v| collect_walrus(v, out)),
        Expr::Compare(c) => {
            collect_walrus(&c.left, out);
            c.comparators.iter().for_each(|v| collect_walrus(v, out));
        }
        _ => {}
    }
}

/// Collects every loaded name in a deferred scope, excluding names bound by
/// comprehensions and names that nested scopes bind for themselves.
struct LoadWalker<'a> {
    out: &'a mut IndexSet<String>,
    shadow: Vec<HashSet<String>>,
}

impl LoadWalker<'_> {
    fn load(&mut self, name: &str) {
        if self.shadow.iter().any(|s| s.contains(name)) {
            return;
        }
        self.out.insert(name.to_string());
    }

    fn body(&mut self, body: &[Stmt]) {
        for s in body {
            self.stmt(s);
        }
    }

    fn nested_function(&mut self, args: &ast::Arguments, body: &[Stmt], decorators: &[Expr]) {
        for d in decorators {
            self.expr(d);
        }
        for a in args.posonlyargs.iter().chain(&args.args).chain(&args.kwonlyargs) {
            if let Some(d) = &a.default {
                self.expr(d);
            }
        }
        let inner = function_free_names(args, body);
        for n in inner.free {
            self.load(&n);
        }
    }

    fn stmt(&mut self, stmt: &Stmt) {
        match stmt {
            Stmt::FunctionDef(f) => self.nested_function(&f.args, &f.body, &f.decorator_list),
            Stmt::AsyncFunctionDef(f) => self.nested_function(&f.args, &f.body, &f.decorator_list),
            Stmt::ClassDef(c) => {
                c.decorator_list.iter().chain(&c.bases).for_each(|e| self.expr(e));
                c.keywords.iter().for_each(|k| self.expr(&k.value));
                let mut class_bound = IndexSet::new();
                let mut g = IndexSet::new();
                let mut nl = IndexSet::new();
                for s in &c.body {
                    collect_bindings(s, &mut class_bound, &mut g, &mut nl);
                }
                let mut inner = IndexSet::new();
                let mut w = LoadWalker {
                    out: &mut inner,
                    shadow: vec![],
                };
                for s in &c.body {
                    w.stmt(s);
                }
                for n in inner {
                    if !class_bound.contains(&n) {
                        self.load(&n);
                    }
                }
            }
            Stmt::Return(r) => r.value.iter().for_each(|v| self.expr(v)),
            Stmt::Delete(d) => d.targets.iter().for_each(|t| self.expr(t)),
            Stmt::Assign(a) => {
                self.expr(&a.value);
                a.targets.iter().for_each(|t| self.expr(t));
            }
            Stmt::TypeAlias(t) => self.expr(&t.value),
            Stmt::AugAssign(a) => {
                if let Expr::Name(n) = a.target.as_ref() {
                    self.load(&n.id);
                }
                self.expr(&a.target);
                self.expr(&a.value);
            }
            Stmt::AnnAssign(a) => {
                a.value.iter().for_each(|v| self.expr(v));
                self.expr(&a.target);
            }
            Stmt::For(f) => {
                self.expr(&f.iter);
                self.expr(&f.target);
                self.body(&f.body);
                self.body(&f.orelse);
            }
            Stmt::AsyncFor(f) => {
                self.expr(&f.iter);
                self.expr(&f.target);
                self.body(&f.body);
                self.body(&f.orelse);
            }
            Stmt::While(w) => {
                self.expr(&w.test);
                self.body(&w.body);
                self.body(&w.orelse);
            }
            Stmt::If(i) => {
                self.expr(&i.test);
                self.body(&i.body);
                self.body(&i.orelse);
            }
            Stmt::With(w) => {
                for item in &w.items {
                    self.expr(&item.context_expr);
                    item.optional_vars.iter().for_each(|v| self.expr(v));
                }
                self.body(&w.body);
            }
            Stmt::AsyncWith(w) => {
                for item in &w.items {
                    self.expr(&item.context_expr);
                    item.optional_vars.iter().for_each(|v| self.expr(v));
                }
                self.body(&w.body);
            }
            Stmt::Match(m) => {
                self.expr(&m.subject);
                for case in &m.cases {
                    case.guard.iter().for_each(|g| self.expr(g));
                    self.body(&case.body);
                }
            }
            Stmt::Raise(r) => {
                r.exc.iter().for_each(|e| self.expr(e));
                r.cause.iter().for_each(|e| self.expr(e));
            }
            Stmt::Try(t) => {
                self.body(&t.body);
                for ast::ExceptHandler::ExceptHandler(h) in &t.handlers {
                    h.type_.iter().for_each(|e| self.expr(e));
                    self.body(&h.body);
                }
                self.body(&t.orelse);
                self.body(&t.finalbody);
            }
            Stmt::TryStar(t) => {
                self.body(&t.body);
                for ast::ExceptHandler::ExceptHandler(h) in &t.handlers {
                    h.type_.iter().for_each(|e| self.expr(e));
                    self.body(&h.body);
                }
                self.body(&t.orelse);
                self.body(&t.finalbody);
            }
            Stmt::Assert(a) => {
                self.expr(&a.test);
                a.msg.iter().for_each(|m| self.expr(m));
            }
            Stmt::Expr(e) => self.expr(&e.value),
            Stmt::Import(_)
            | Stmt::ImportFrom(_)
            | Stmt::Global(_)
            | Stmt::Nonlocal(_)
            | Stmt::Pass(_)
            | Stmt::Break(_)
            | Stmt::Continue(_) => {}
        }
    }

    fn comprehension(&mut self, generators: &[ast::Comprehension], elts: &[&Expr]) {
        let mut bound = HashSet::new();
        for (i, g) in generators.iter().enumerate() {
            if i == 0 {
                self.expr(&g.iter);
            }
            let mut names = IndexSet::new();
            collect_target_names(&g.target, &mut names);
            bound.extend(names);
        }
        self.shadow.push(bound);
        for (i, g) in generators.iter().enumerate() {
            if i > 0 {
                self.expr(&g.iter);
            }
            g.ifs.iter().for_each(|e| self.expr(e));
        }
        elts.iter().for_each(|e| self.expr(e));
        self.shadow.pop();
    }

    fn expr(&mut self, expr: &Expr) {
        match expr {
            Expr::Name(n) => {
                if n.ctx == ExprContext::Load {
                    self.load(&n.id);
                }
            }
            Expr::Lambda(l) => {
                let body = [Stmt::Expr(ast::StmtExpr {
                    range: l.range,
                    value: l.body.clone(),
                })];
                self.nested_function(&l.args, &body, &[]);
            }
            Expr::ListComp(c) => self.comprehension(&c.generators, &[&c.elt]),
            Expr::SetComp(c) => self.comprehension(&c.generators, &[&c.elt]),
            Expr::GeneratorExp(c) => self.comprehension(&c.generators, &[&c.elt]),
            Expr::DictComp(c) => self.comprehension(&c.generators, &[&c.key, &c.value]),
            Expr::BoolOp(b) => b.values.iter().for_each(|v| self.expr(v)),
            Expr::NamedExpr(n) => self.expr(&n.value),
            Expr::BinOp(b) => {
                self.expr(&b.left);
                self.expr(&b.right);
            }
            Expr::UnaryOp(u) => self.expr(&u.operand),
            Expr::IfExp(i) => {
                self.expr(&i.test);
                self.expr(&i.body);
                self.expr(&i.orelse);
            }
            Expr::Dict(d) => {
                d.keys.iter().flatten().for_each(|k| self.expr(k));
                d.values.iter().for_each(|v| self.expr(v));
            }
            Expr::Set(s) => s.elts.iter().for_each(|e| self.expr(e)),
            Expr::Await(a) => self.expr(&a.value),
            Expr::Yield(y) => y.value.iter().for_each(|v| self.expr(v)),
            Expr::YieldFrom(y) => self.expr(&y.value),
            Expr::Compare(c) => {
                self.expr(&c.left);
                c.comparators.iter().for_each(|e| self.expr(e));
            }
            Expr::Call(c) => {
                self.expr(&c.func);
                c.args.iter().for_each(|a| self.expr(a));
                c.keywords.iter().for_each(|k| self.expr(&k.value));
            }
            Expr::FormattedValue(f) => {
                self.expr(&f.value);
                f.format_spec.iter().for_each(|s| self.expr(s));
            }
            Expr::JoinedStr(j) => j.values.iter().for_each(|v| self.expr(v)),
            Expr::Constant(_) => {}
            Expr::Attribute(a) => self.expr(&a.value),
            Expr::Subscript(s) => {
                self.expr(&s.value);
                self.expr(&s.slice);
            }
            Expr::Starred(s) => self.expr(&s.value),
            Expr::List(l) => l.elts.iter().for_each(|e| self.expr(e)),
            Expr::Tuple(t) => t.elts.iter().for_each(|e| self.expr(e)),
            Expr::Slice(s) => [&s.lower, &s.upper, &s.step]
                .into_iter()
                .flatten()
                .for_each(|e| self.expr(e)),
        }
    }
}
