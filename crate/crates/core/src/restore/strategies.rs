use std::collections::HashSet;
use std::fs;
use std::path::{Component, Path, PathBuf};

use crate::analyzer::{imported_modules, is_stdlib_module, locate_definition, DefinitionVerdict};
use crate::classify::{
    extract_missing_module, extract_missing_path, extract_undefined_name, normalize_relative, AccessMode, ErrorEvent,
};
use crate::harness::{InstallOutcome, SandboxEnv};
use crate::llm::{render, truncate_script, Context, LlmError, Payload, Template};
use crate::notebook::{code_cells, insert_cell, to_script, Notebook};

use super::{ActionKind, ReorderSuggestion, RestorationAction, RestoreError, Restorer, StrategyResult};

pub struct StrategyContext<'r, 'a> {
    pub restorer: &'r Restorer<'a>,
    pub nb: &'r Notebook,
}

enum Ask {
    Payload(Payload, String),
    Budget(String),
    Failed(String, Option<String>),
}

impl StrategyContext<'_, '_> {
    fn context(&self, ev: &ErrorEvent, extra: &[(&str, String)]) -> Context {
        let budget = self.restorer.llm.settings().context_token_budget;
        let mut ctx = Context::new();
        ctx.insert("script".into(), truncate_script(&to_script(self.nb), ev.cell_index, budget));
        ctx.insert("ename".into(), ev.ename.clone());
        ctx.insert("evalue".into(), ev.evalue.clone());
        for (k, v) in extra {
            ctx.insert(k.to_string(), v.clone());
        }
        ctx
    }

    fn ask(&self, template: Template, ctx: &Context) -> Result<Ask, RestoreError> {
        let spec = render(template, ctx)?;
        let fp = spec.fingerprint.clone();
        match self.restorer.llm.complete(&spec) {
            Ok(reply) => Ok(match reply.payload {
                Some(p) => Ask::Payload(p, fp),
                None => Ask::Failed("reply had no usable payload".into(), Some(fp)),
            }),
            Err(LlmError::BudgetExceeded) => Ok(Ask::Budget(fp)),
            Err(LlmError::EndpointUnavailable(e)) => Ok(Ask::Failed(format!("model unavailable: {e}"), Some(fp))),
            Err(e) => Err(e.into()),
        }
    }
}

fn done(action: RestorationAction) -> StrategyResult {
    StrategyResult {
        action,
        notebook: None,
        budget: false,
    }
}

fn budget(action: RestorationAction, fp: String) -> StrategyResult {
    let mut action = action.failed("completion budget exhausted");
    action.prompt_fingerprint = Some(fp);
    StrategyResult {
        action,
        notebook: None,
        budget: true,
    }
}

fn ask_failed(mut action: RestorationAction, detail: String, fp: Option<String>) -> StrategyResult {
    action.prompt_fingerprint = fp;
    done(action.failed(detail))
}

pub fn module_strategy(
    cx: &StrategyContext<'_, '_>,
    ev: &ErrorEvent,
    env: &mut SandboxEnv,
) -> Result<StrategyResult, RestoreError> {
    let provisioner = cx.restorer.provisioner;
    let module = extract_missing_module(ev).ok().map(|m| m.top_level);
    let mut action = RestorationAction::new(ActionKind::InstallModule, module.clone().unwrap_or_default());
    if let Some(m) = &module {
        match provisioner.install(env, m) {
            InstallOutcome::Success => {
                action.artifacts.packages.push(m.clone());
                return Ok(done(action));
            }
            InstallOutcome::NotFound => {}
            other => return Ok(done(action.failed(format!("installing {m}: {other:?}")))),
        }
    }

    action.kind = ActionKind::LlmModuleName;
    let ctx = cx.context(ev, &[("module", module.clone().unwrap_or_else(|| "unknown".into()))]);
    let (package, fp) = match cx.ask(Template::ModuleName, &ctx)? {
        Ask::Payload(Payload::ModuleName { package }, fp) => (package, fp),
        Ask::Payload(..) => unreachable!("module prompt yields a module payload"),
        Ask::Budget(fp) => return Ok(budget(action, fp)),
        Ask::Failed(detail, fp) => return Ok(ask_failed(action, detail, fp)),
    };
    action.prompt_fingerprint = Some(fp);
    match provisioner.install(env, &package) {
        InstallOutcome::Success => {
            action.detail = Some(format!("installed {package}"));
            action.artifacts.packages.push(package);
            Ok(done(action))
        }
        other => Ok(done(action.failed(format!("installing suggested {package}: {other:?}")))),
    }
}

fn escapes(path: &Path) -> bool {
    path.is_absolute() || normalize_relative(path).components().next() == Some(Component::ParentDir)
}

/// Creates `dir` and any missing parents, returning the outermost directory created.
fn create_dirs(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut missing = Vec::new();
    let mut cur = Some(dir);
    while let Some(d) = cur {
        if d.as_os_str().is_empty() || d.exists() {
            break;
        }
        missing.push(d.to_path_buf());
        cur = d.parent();
    }
    missing.reverse();
    fs::create_dir_all(dir)?;
    Ok(missing.into_iter().take(1).collect())
}

pub fn file_strategy(cx: &StrategyContext<'_, '_>, ev: &ErrorEvent) -> Result<StrategyResult, RestoreError> {
    let missing = match extract_missing_path(ev) {
        Ok(m) => m,
        Err(e) => return Ok(done(RestorationAction::new(ActionKind::SynthInputFile, "").failed(e.to_string()))),
    };
    let workdir = cx.nb.workdir();
    let kind = match missing.mode {
        AccessMode::Write => ActionKind::CreateDirectory,
        AccessMode::Read => ActionKind::SynthInputFile,
    };
    let mut action = RestorationAction::new(kind, missing.display());
    if escapes(&missing.path) {
        return Ok(done(action.failed("path lies outside the notebook directory")));
    }
    let target = workdir.join(&missing.path);

    if missing.mode == AccessMode::Write {
        action.artifacts.dirs = create_dirs(&target)?;
        return Ok(done(action));
    }

    let policy = &cx.restorer.policy;
    let ext = missing.extension().unwrap_or_default();
    let ext_ok = policy.file_allowlist.iter().any(|a| *a == ext || (ext == "yml" && a == "yaml"));
    if !ext_ok {
        let shown = if ext.is_empty() { "extensionless".to_string() } else { format!(".{ext}") };
        return Ok(done(action.failed(format!("{shown} inputs are not synthesized"))));
    }
    let ctx = cx.context(ev, &[("path", missing.display()), ("file_type", ext)]);
    let (content, fp) = match cx.ask(Template::InputFile, &ctx)? {
        Ask::Payload(Payload::InputFile { content, .. }, fp) => (content, fp),
        Ask::Payload(..) => unreachable!("input-file prompt yields a file payload"),
        Ask::Budget(fp) => return Ok(budget(action, fp)),
        Ask::Failed(detail, fp) => return Ok(ask_failed(action, detail, fp)),
    };
    action.prompt_fingerprint = Some(fp);
    if content.len() > policy.max_file_bytes {
        let detail = format!("generated file is {} bytes, over the {} byte cap", content.len(), policy.max_file_bytes);
        return Ok(done(action.failed(detail)));
    }
    if let Some(parent) = target.parent() {
        action.artifacts.dirs = create_dirs(parent)?;
    }
    fs::write(&target, content)?;
    action.artifacts.files.push(target);
    Ok(done(action))
}

pub fn name_strategy(
    cx: &StrategyContext<'_, '_>,
    ev: &ErrorEvent,
    env: &mut SandboxEnv,
) -> Result<StrategyResult, RestoreError> {
    let name = match extract_undefined_name(ev) {
        Ok(n) => n,
        Err(e) => return Ok(done(RestorationAction::new(ActionKind::InsertDefinition, "").failed(e.to_string()))),
    };
    let mut action = RestorationAction::new(ActionKind::InsertDefinition, name.clone());
    let location = locate_definition(cx.nb, &name, ev.cell_index);
    let ctx = cx.context(
        ev,
        &[
            ("name", name.clone()),
            ("error_cell", ev.cell_index.to_string()),
            ("def_location", location.describe()),
        ],
    );
    let (source, fp) = match cx.ask(Template::NameDefinition, &ctx)? {
        Ask::Payload(Payload::Definition { source }, fp) => (source, fp),
        Ask::Payload(..) => unreachable!("definition prompt yields a definition payload"),
        Ask::Budget(fp) => return Ok(budget(action, fp)),
        Ask::Failed(detail, fp) => return Ok(ask_failed(action, detail, fp)),
    };
    action.prompt_fingerprint = Some(fp);

    let already_imported: HashSet<String> = code_cells(cx.nb)
        .take_while(|c| c.index < ev.cell_index)
        .flat_map(|c| imported_modules(&c.source))
        .collect();
    for module in imported_modules(&source) {
        if is_stdlib_module(&module) || already_imported.contains(&module) || env.has_module(&module) {
            continue;
        }
        if cx.restorer.provisioner.install(env, &module) == InstallOutcome::Success {
            action.artifacts.packages.push(module);
        }
    }

    let at = cx.nb.cells.iter().position(|c| c.index == ev.cell_index).unwrap_or(ev.cell_index);
    let source = source.trim_end_matches('\n').to_string();
    let notebook = match insert_cell(cx.nb, at, &source) {
        Ok(nb) => nb,
        Err(e) => return Ok(done(action.failed(e.to_string()))),
    };
    action.artifacts.cells.push(at);
    if let (DefinitionVerdict::DefinedAfterUse, Some(def_cell)) = (location.verdict, location.def_cell) {
        action.reorder = Some(ReorderSuggestion {
            name,
            use_cell: ev.cell_index,
            def_cell,
        });
    }
    Ok(StrategyResult {
        action,
        notebook: Some(notebook),
        budget: false,
    })
}
