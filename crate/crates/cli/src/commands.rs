use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context as _, Result};
use nbrestore::analyzer::check_compilable;
use nbrestore::classify::TriageTable;
use nbrestore::config::{Config, ExecutorKind, ProvisionerKind};
use nbrestore::harness::{
    assess_notebook, prepare_sandbox, DriverExecutor, Executor, IndexProvisioner, Provisioner, ReplayExecutor,
    SandboxEnv, VenvProvisioner,
};
use nbrestore::llm::{HttpTransport, LlmClient, Mode, ReplayStore};
use nbrestore::miner::{
    fetch_repo, find_notebooks, sample_fraction, search_repos, FixtureIndex, GitFetcher, GitHubSearch, SampleManifest,
    SearchBackend,
};
use nbrestore::notebook::{screen_notebook, Notebook, ScreeningStatus};
use nbrestore::report::{aggregate, emit, EmitFormat, NotebookResult};
use nbrestore::restore::{ReportDigest, RestorationTrace, Restorer};
use serde_json::json;
use tracing::{info, warn};

use crate::GlobalOpts;

const RESULTS_FILE: &str = "results.jsonl";

pub struct Pipeline {
    config: Config,
    offline: bool,
    sandbox_root: PathBuf,
    _scratch: Option<tempfile::TempDir>,
}

impl Pipeline {
    pub fn new(opts: &GlobalOpts) -> Result<Self> {
        let mut config = match &opts.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        if let Some(dir) = &opts.replay {
            config.executor.kind = ExecutorKind::Replay;
            config.executor.traces = dir.join("traces");
            config.llm.mode = Mode::Replay;
            config.llm.store = dir.join("llm");
            config.sandbox.provisioner = ProvisionerKind::Index;
            config.sandbox.index = dir.join("packages.json");
        }
        if opts.offline && config.llm.mode != Mode::Replay {
            info!("offline: model replies come from the replay store");
            config.llm.mode = Mode::Replay;
        }
        if let Some(t) = opts.timeout {
            config.limits.notebook_timeout = t;
        }
        if let Some(w) = opts.workers {
            config.workers = w;
        }
        if let Some(s) = opts.seed {
            config.seed = s;
        }
        config.workers = config.workers.max(1);

        let (sandbox_root, scratch) = if opts.config.is_some() {
            (config.sandbox.root.clone(), None)
        } else {
            let dir = tempfile::Builder::new().prefix("nbrestore-sandboxes").tempdir()?;
            (dir.path().to_path_buf(), Some(dir))
        };
        Ok(Pipeline {
            config,
            offline: opts.offline,
            sandbox_root,
            _scratch: scratch,
        })
    }

    fn triage(&self) -> Result<TriageTable> {
        Ok(self.config.triage_table()?)
    }

    fn executor(&self) -> Result<Box<dyn Executor>> {
        let cfg = &self.config.executor;
        Ok(match cfg.kind {
            ExecutorKind::Replay => Box::new(
                ReplayExecutor::load(&cfg.traces)
                    .with_context(|| format!("loading traces from {}", cfg.traces.display()))?,
            ),
            ExecutorKind::Driver => {
                let mut d = DriverExecutor::new(&cfg.driver);
                if let Some(python) = &cfg.interpreter {
                    d = d.with_interpreter(python);
                }
                Box::new(d)
            }
        })
    }

    fn provisioner(&self) -> Result<Box<dyn Provisioner>> {
        let cfg = &self.config.sandbox;
        Ok(match cfg.provisioner {
            ProvisionerKind::Index if cfg.index.exists() => Box::new(IndexProvisioner::from_file(&cfg.index)?),
            ProvisionerKind::Index => {
                info!(index = %cfg.index.display(), "package catalogue not found; nothing is installable");
                Box::new(IndexProvisioner::new(BTreeMap::new()))
            }
            ProvisionerKind::Venv => Box::new(VenvProvisioner {
                base_python: cfg.base_python.clone(),
                ..VenvProvisioner::default()
            }),
        })
    }

    fn llm(&self) -> Result<LlmClient> {
        let cfg = &self.config.llm;
        let store = ReplayStore::new(&cfg.store);
        Ok(match cfg.mode {
            Mode::Replay => LlmClient::replay(store),
            Mode::Live => LlmClient::live(cfg.settings.clone(), Box::new(HttpTransport::new(&cfg.settings)?)),
            Mode::Record => {
                LlmClient::record(cfg.settings.clone(), Box::new(HttpTransport::new(&cfg.settings)?), store)
            }
        })
    }

    fn sandbox(&self, i: usize, nb: &Notebook, provisioner: &dyn Provisioner) -> Result<SandboxEnv> {
        let stem = nb.path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let dir = self.sandbox_root.join(format!("{i:04}-{stem}"));
        Ok(prepare_sandbox(&nb.workdir(), &dir, nb.repo.as_deref(), provisioner)?)
    }

    pub fn mine(&self, out: Option<PathBuf>, index: Option<PathBuf>) -> Result<bool> {
        let m = &self.config.miner;
        let corpus = out.unwrap_or_else(|| m.corpus.clone());
        let backend: Box<dyn SearchBackend> = match index.or_else(|| m.index.clone()) {
            Some(path) => Box::new(FixtureIndex::load(&path)?),
            None if self.offline => bail!("--offline needs a repository index (--index or miner.index)"),
            None => Box::new(GitHubSearch::from_env(m.api_base.as_deref())?),
        };
        let stubs = search_repos(backend.as_ref(), &m.tiers, &m.filters)?;
        info!(repos = stubs.len(), "search finished");

        let fetcher = GitFetcher::with_base(&m.clone_base);
        let fetched = par_map(&stubs, self.config.workers, |_, stub| fetch_repo(&fetcher, stub, &corpus));
        let mut records = Vec::new();
        let mut ok = true;
        for (stub, r) in stubs.iter().zip(fetched) {
            match r {
                Ok(rec) => records.push(rec),
                Err(e) => {
                    ok = false;
                    warn!(repo = %stub.identifier, error = %e, "fetch failed");
                }
            }
        }

        let all: Vec<(usize, PathBuf)> = records
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.notebooks.iter().map(move |n| (i, n.clone())))
            .collect();
        let sampled = sample_fraction(&all, m.notebook_fraction, self.config.seed);
        for r in &mut records {
            r.notebooks.clear();
        }
        for (i, nb) in sampled {
            records[i].notebooks.push(nb);
        }
        let manifest = SampleManifest::build(&records, &m.tiers, self.config.seed, m.notebook_fraction);
        fs::create_dir_all(&corpus)?;
        let path = corpus.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        println!(
            "{}",
            json!({
                "manifest": path,
                "repos": records.len(),
                "notebooks": all.len(),
                "sampled": manifest.repos.iter().map(|r| r.notebooks.len()).sum::<usize>(),
            })
        );
        Ok(ok)
    }

    pub fn scan(&self, paths: &[PathBuf]) -> Result<bool> {
        for path in collect_notebooks(paths)? {
            let line = match Notebook::read(&path) {
                Err(e) => json!({ "notebook": path, "screening": { "status": "corrupted", "detail": e.to_string() } }),
                Ok(nb) => {
                    let screening = screen_notebook(&nb);
                    let compile = (screening.status == ScreeningStatus::Ok).then(|| check_compilable(&nb));
                    json!({ "notebook": path, "screening": screening, "compile": compile })
                }
            };
            println!("{line}");
        }
        Ok(true)
    }

    pub fn exec(&self, paths: &[PathBuf], out: Option<&Path>) -> Result<bool> {
        let notebooks = collect_notebooks(paths)?;
        let executor = self.executor()?;
        let provisioner = self.provisioner()?;
        let triage = self.triage()?;
        let sink = ResultSink::open(out)?;
        let failures = AtomicUsize::new(0);
        par_map(&notebooks, self.config.workers, |i, path| {
            let outcome = (|| -> Result<Option<NotebookResult>> {
                let Some(nb) = screened(path)? else { return Ok(None) };
                let env = self.sandbox(i, &nb, provisioner.as_ref())?;
                let report = assess_notebook(&nb, &env, &self.config.limits, executor.as_ref())?;
                let digest = ReportDigest::of(&report, &triage);
                println!("{}", digest_line(path, &digest, &triage));
                Ok(Some(NotebookResult {
                    notebook: path.clone(),
                    repo: nb.repo.clone(),
                    stars: None,
                    initial: digest,
                    restoration: None,
                }))
            })();
            self.settle(path, outcome, &sink, &failures);
        });
        Ok(failures.load(Ordering::SeqCst) == 0)
    }

    pub fn restore(&self, paths: &[PathBuf], out: Option<&Path>) -> Result<bool> {
        let notebooks: Vec<PathBuf> = collect_notebooks(paths)?
            .into_iter()
            .filter(|p| !p.to_string_lossy().ends_with(".restored.ipynb"))
            .collect();
        let executor = self.executor()?;
        let provisioner = self.provisioner()?;
        let llm = self.llm()?;
        let triage = self.triage()?;
        let restorer = Restorer {
            executor: executor.as_ref(),
            provisioner: provisioner.as_ref(),
            llm: &llm,
            triage: &triage,
            limits: self.config.limits.clone(),
            policy: self.config.restore.clone(),
        };
        let sink = ResultSink::open(out)?;
        let failures = AtomicUsize::new(0);
        par_map(&notebooks, self.config.workers, |i, path| {
            let outcome = (|| -> Result<Option<NotebookResult>> {
                let Some(nb) = screened(path)? else { return Ok(None) };
                let mut env = self.sandbox(i, &nb, provisioner.as_ref())?;
                let restored = restorer.restore(&nb, &mut env)?;
                let trace_dir = out.map_or_else(|| nb.workdir(), |o| o.join("traces"));
                restored.write(&trace_dir)?;
                let t = &restored.trace;
                println!(
                    "{}",
                    json!({
                        "notebook": path,
                        "final_status": t.final_status,
                        "stop_reason": t.stop_reason,
                        "initial": format!("{}/{}", t.initial.cells_ok, t.initial.total_code_cells),
                        "final": format!("{}/{}", t.final_report.cells_ok, t.final_report.total_code_cells),
                        "cells_gained": t.cells_gained,
                        "delta_ratio": t.delta_ratio,
                        "steps": t.steps.len(),
                        "mutated": t.mutated,
                    })
                );
                let mut result = NotebookResult::from_trace(restored.trace);
                result.repo = nb.repo.clone();
                Ok(Some(result))
            })();
            self.settle(path, outcome, &sink, &failures);
        });
        Ok(failures.load(Ordering::SeqCst) == 0)
    }

    fn settle(&self, path: &Path, outcome: Result<Option<NotebookResult>>, sink: &ResultSink, failures: &AtomicUsize) {
        match outcome {
            Ok(Some(result)) => {
                if let Err(e) = sink.push(&result) {
                    failures.fetch_add(1, Ordering::SeqCst);
                    eprintln!("error: {}: writing result: {e:#}", path.display());
                }
            }
            Ok(None) => {}
            Err(e) => {
                failures.fetch_add(1, Ordering::SeqCst);
                eprintln!("error: {}: {e:#}", path.display());
            }
        }
    }

    pub fn report(&self, inputs: &[PathBuf], out: &Path, formats: &[EmitFormat], tiers: bool) -> Result<bool> {
        let results = load_results(inputs)?;
        if results.is_empty() {
            bail!("no results or traces found in the given inputs");
        }
        let triage = self.triage()?;
        let summary = aggregate(&results, &triage, tiers.then_some(self.config.miner.tiers.as_slice()));
        for path in emit(&summary, formats, out)? {
            println!("{}", path.display());
        }
        Ok(true)
    }
}

fn digest_line(path: &Path, d: &ReportDigest, triage: &TriageTable) -> serde_json::Value {
    json!({
        "notebook": path,
        "cells_ok": d.cells_ok,
        "total_code_cells": d.total_code_cells,
        "ratio": d.ratio,
        "category": d.category.to_string(),
        "triage": triage.triage(&d.category),
        "error_cell": d.first_error.as_ref().map(|e| e.cell_index),
    })
}

/// Reads and screens `path`; notebooks that are not analyzable are reported and skipped.
fn screened(path: &Path) -> Result<Option<Notebook>> {
    let nb = match Notebook::read(path) {
        Ok(nb) => nb,
        Err(e) => {
            println!("{}", json!({ "notebook": path, "screening": { "status": "corrupted", "detail": e.to_string() } }));
            return Ok(None);
        }
    };
    let screening = screen_notebook(&nb);
    if screening.status != ScreeningStatus::Ok {
        println!("{}", json!({ "notebook": path, "screening": screening }));
        return Ok(None);
    }
    Ok(Some(nb))
}

fn collect_notebooks(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            out.extend(find_notebooks(p));
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            bail!("{}: no such file or directory", p.display());
        }
    }
    Ok(out)
}

/// Appends one JSON line per notebook result to `results.jsonl`.
struct ResultSink(Option<Mutex<fs::File>>);

impl ResultSink {
    fn open(dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = dir else { return Ok(ResultSink(None)) };
        fs::create_dir_all(dir)?;
        let file = fs::File::create(dir.join(RESULTS_FILE))?;
        Ok(ResultSink(Some(Mutex::new(file))))
    }

    fn push(&self, result: &NotebookResult) -> Result<()> {
        if let Some(file) = &self.0 {
            let mut line = serde_json::to_string(result)?;
            line.push('\n');
            file.lock().unwrap_or_else(|e| e.into_inner()).write_all(line.as_bytes())?;
        }
        Ok(())
    }
}

/// Results from `*.jsonl` files, plus traces for notebooks no result file covers.
fn load_results(inputs: &[PathBuf]) -> Result<Vec<NotebookResult>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            files.extend(
                walkdir::WalkDir::new(input)
                    .into_iter()
                    .filter_map(Result::ok)
                    .filter(|e| e.file_type().is_file())
                    .map(|e| e.into_path()),
            );
        } else {
            files.push(input.clone());
        }
    }
    files.sort();

    let mut results: BTreeMap<PathBuf, NotebookResult> = BTreeMap::new();
    let mut traces = Vec::new();
    for file in files {
        let name = file.to_string_lossy();
        if name.ends_with(".jsonl") {
            let text = fs::read_to_string(&file)?;
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let r: NotebookResult =
                    serde_json::from_str(line).with_context(|| format!("{}:{}", file.display(), n + 1))?;
                results.insert(r.notebook.clone(), r);
            }
        } else if name.ends_with(".restore.json") {
            let text = fs::read_to_string(&file)?;
            let t: RestorationTrace = serde_json::from_str(&text).with_context(|| file.display().to_string())?;
            traces.push(t);
        }
    }
    for t in traces {
        results.entry(t.notebook.clone()).or_insert_with(|| NotebookResult::from_trace(t));
    }
    Ok(results.into_values().collect())
}

/// Applies `f` to every item on up to `workers` threads, keeping input order.
fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                let r = f(i, item);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().unwrap().expect("every item is processed")).collect()
}
