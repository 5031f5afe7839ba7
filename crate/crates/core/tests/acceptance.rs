//! Acceptance gate. Prints one PASS or FAIL line per criterion and exits
//! non-zero when any of them fails.

mod support;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use nbrestore::analyzer::notebook_def_use;
use nbrestore::classify::{Restorability, TriageTable};
use nbrestore::harness::{
    execute_notebook, prepare_sandbox, CellRun, ExecutionLimits, Executor, HarnessError, IndexProvisioner,
    InstallRecord, Provisioner, ReplayExecutor, SandboxEnv, Session,
};
use nbrestore::llm::{LlmClient, LlmSettings, ReplayStore};
use nbrestore::notebook::{write_notebook, Notebook};
use nbrestore::report::{aggregate, percent, CorpusSummary, NotebookResult};
use nbrestore::restore::{FinalStatus, ReportDigest, RestoreOutcome, RestorePolicy, Restorer, StepVerdict};
use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, TestRunner};
use serde_json::Value;
use support::{catalogue, tree_snapshot, write_code_notebook, ScriptedModel, SimExecutor};

type Check = Result<(), String>;
type CheckFn = fn() -> Check;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn runner_config(cases: u32) -> RunnerConfig {
    RunnerConfig {
        cases,
        failure_persistence: None,
        ..RunnerConfig::default()
    }
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn notebooks_in(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_map(Result::ok)
        .map(|e| e.into_path())
        .filter(|p| p.extension().is_some_and(|e| e == "ipynb"))
        .collect();
    out.sort();
    out
}

fn stem(path: &Path) -> String {
    path.file_stem().unwrap().to_string_lossy().into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn quick_limits() -> ExecutionLimits {
    ExecutionLimits::with_timeout(Duration::from_millis(500))
}

fn taxonomy_digests() -> Vec<(String, ReportDigest)> {
    let dir = fixtures().join("taxonomy");
    let executor = ReplayExecutor::load(&dir.join("traces")).unwrap();
    let triage = TriageTable::builtin();
    notebooks_in(&dir)
        .into_iter()
        .map(|p| {
            let nb = Notebook::read(&p).unwrap();
            let report = execute_notebook(&nb, &SandboxEnv::detached(), &quick_limits(), &executor).unwrap();
            (stem(&p), ReportDigest::of(&report, triage))
        })
        .collect()
}

fn taxonomy_fidelity() -> Check {
    let labels = read_json(&fixtures().join("taxonomy/labels.json"));
    let labels = labels.as_object().unwrap();
    let triage = TriageTable::builtin();
    let start = Instant::now();
    let digests = taxonomy_digests();
    let elapsed = start.elapsed();

    ensure!(digests.len() >= 30, "only {} notebooks", digests.len());
    ensure!(digests.len() == labels.len(), "{} notebooks but {} labels", digests.len(), labels.len());
    let mut seen = BTreeSet::new();
    let mut partition: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (name, d) in &digests {
        let want = &labels[name.as_str()];
        let got = d.category.to_string();
        ensure!(want["category"] == got.as_str(), "{name}: labelled {} but classified {got}", want["category"]);
        let verdict = triage.triage(&d.category);
        ensure!(
            want["triage"] == serde_json::to_value(verdict).unwrap(),
            "{name}: triage {verdict:?} but labelled {}",
            want["triage"]
        );
        let class = verdict.map_or("executable".to_string(), |v| format!("{v:?}"));
        partition.entry(class).or_default().insert(name.clone());
        seen.insert(got.split('(').next().unwrap().to_string());
    }
    for category in [
        "Executable",
        "ModuleNotFound",
        "FileNotFound",
        "NameError",
        "StdinNotImplemented",
        "Timeout",
        "ImportError",
        "Attribute",
        "Value",
        "Type",
        "Key",
        "Index",
        "Syntax",
        "Other",
    ] {
        ensure!(seen.contains(category), "no fixture for {category}");
    }
    let placed: usize = partition.values().map(BTreeSet::len).sum();
    let union: BTreeSet<&String> = partition.values().flatten().collect();
    ensure!(placed == digests.len() && union.len() == digests.len(), "triage classes overlap: {partition:?}");
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(())
}

/// Runs code cells one at a time from the raw notebook JSON and counts the
/// successes before the first failure.
fn brute_force_ratio(path: &Path, executor: &dyn Executor, env: &SandboxEnv, limit: Duration) -> (usize, usize) {
    let raw = read_json(path);
    let cells: Vec<(usize, String)> = raw["cells"]
        .as_array()
        .unwrap()
        .iter()
        .enumerate()
        .filter(|(_, c)| c["cell_type"] == "code")
        .map(|(i, c)| {
            let src = match &c["source"] {
                Value::String(s) => s.clone(),
                Value::Array(parts) => parts.iter().map(|p| p.as_str().unwrap()).collect(),
                _ => String::new(),
            };
            (i, src)
        })
        .collect();
    let nb = Notebook::read(path).unwrap();
    let mut session = executor.open(&nb, env, path.parent().unwrap()).unwrap();
    let deadline = Instant::now() + limit;
    let mut ok = 0;
    for (i, src) in &cells {
        match session.run_cell(*i, src, deadline) {
            Ok(CellRun::Ok) => ok += 1,
            _ => break,
        }
    }
    session.close();
    (ok, cells.len())
}

fn oracle_case(path: &Path, executor: &dyn Executor, env: &SandboxEnv) -> Result<f64, String> {
    let limit = Duration::from_millis(500);
    let (ok, total) = brute_force_ratio(path, executor, env, limit);
    let nb = Notebook::read(path).unwrap();
    let report = execute_notebook(&nb, env, &ExecutionLimits::with_timeout(limit), executor).map_err(|e| e.to_string())?;
    let expected = ok as f64 / total as f64;
    ensure!(
        report.ratio == expected && report.cells_ok == ok,
        "{}: harness {}/{} = {} but oracle {ok}/{total}",
        path.display(),
        report.cells_ok,
        report.total_code_cells,
        report.ratio
    );
    Ok(report.ratio)
}

fn oracle_equivalence() -> Check {
    let env = SandboxEnv::detached();
    let tax = fixtures().join("taxonomy");
    let executor = ReplayExecutor::load(&tax.join("traces")).unwrap();
    let mut ratios = BTreeMap::new();
    for p in notebooks_in(&tax) {
        ratios.insert(stem(&p), oracle_case(&p, &executor, &env)?);
    }
    ensure!(ratios["value_ten_of_thirteen"] == 10.0 / 13.0, "10/13 case gave {}", ratios["value_ten_of_thirteen"]);
    ensure!(percent(10, 13) == "76.9", "10/13 renders as {}", percent(10, 13));
    ensure!(ratios["module_first_cell"] == 0.0, "first-cell error gave {}", ratios["module_first_cell"]);
    ensure!(ratios["import_removed_alias"] == 0.0, "single failing cell gave {}", ratios["import_removed_alias"]);

    let replay = fixtures().join("replay");
    let executor = ReplayExecutor::load(&replay.join("traces")).unwrap();
    for p in notebooks_in(&replay) {
        oracle_case(&p, &executor, &env)?;
    }
    let timeout = fixtures().join("timeout");
    let executor = ReplayExecutor::load(&timeout.join("traces")).unwrap();
    oracle_case(&timeout.join("infinite_loop.ipynb"), &executor, &env)?;

    let dir = tempfile::tempdir().unwrap();
    let mut runner = TestRunner::new(runner_config(64));
    runner
        .run(&proptest::collection::vec(sim_cell(), 1..10), |cells| {
            let path = dir.path().join("nb.ipynb");
            write_code_notebook(&path, &cells.iter().map(String::as_str).collect::<Vec<_>>());
            oracle_case(&path, &SimExecutor, &env).map_err(TestCaseError::fail)?;
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn sim_cell() -> impl Strategy<Value = String> {
    prop_oneof![
        4 => (0..5u8).prop_map(|i| format!("v{i} = {i}")),
        2 => (0..5u8).prop_map(|i| format!("w = v{i} + 1")),
        1 => Just("# raises: ValueError: bad shape".to_string()),
        1 => Just("import not_installed_anywhere".to_string()),
        1 => Just("text = open('absent.txt').read()".to_string()),
    ]
}

struct Project {
    dir: tempfile::TempDir,
    provisioner: IndexProvisioner,
}

impl Project {
    fn replay_copy() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let src = fixtures().join("replay");
        for entry in walkdir::WalkDir::new(&src) {
            let entry = entry.unwrap();
            let dest = dir.path().join(entry.path().strip_prefix(&src).unwrap());
            if entry.file_type().is_dir() {
                fs::create_dir_all(&dest).unwrap();
            } else {
                fs::copy(entry.path(), &dest).unwrap();
            }
        }
        let provisioner = IndexProvisioner::from_file(&dir.path().join("packages.json")).unwrap();
        Project { dir, provisioner }
    }

    fn restore(&self, rel: &str) -> RestoreOutcome {
        let root = self.dir.path();
        let executor = ReplayExecutor::load(&root.join("traces")).unwrap();
        let llm = LlmClient::replay(ReplayStore::new(root.join("llm")));
        let nb = Notebook::read(root.join(rel)).unwrap();
        let sandbox = root.join("sandboxes").join(stem(Path::new(rel)));
        let mut env = prepare_sandbox(&nb.workdir(), &sandbox, None, &self.provisioner).unwrap();
        let restorer = Restorer {
            executor: &executor,
            provisioner: &self.provisioner,
            llm: &llm,
            triage: TriageTable::builtin(),
            limits: ExecutionLimits::default(),
            policy: RestorePolicy::default(),
        };
        restorer.restore(&nb, &mut env).unwrap()
    }
}

const RANDOM_FOREST: &str = "random_forest/random_forest_algorithm.ipynb";
const DINOSAURUS: &str = "deep-learning-coursera/DinosaurusIsland--Character level language model final-v3.ipynb";

fn random_forest() -> Check {
    let project = Project::replay_copy();
    let out = project.restore(RANDOM_FOREST);
    let t = &out.trace;
    ensure!(t.initial.total_code_cells == 24, "{} code cells", t.initial.total_code_cells);
    ensure!(t.initial.cells_ok == 1, "initially {} cells ran", t.initial.cells_ok);
    ensure!(
        t.initial.first_error.as_ref().map(|e| (e.cell_index, e.ename.as_str())) == Some((1, "FileNotFoundError")),
        "initial error {:?}",
        t.initial.first_error
    );
    ensure!(t.final_status == FinalStatus::FullyRestored, "status {:?}", t.final_status);
    ensure!(t.final_report.cells_ok == 24 && t.final_report.ratio == 1.0, "final {:?}", t.final_report);
    ensure!(t.cells_gained == 23 && t.delta_ratio == 23.0 / 24.0, "delta {} ({} cells)", t.delta_ratio, t.cells_gained);
    let csv = project.dir.path().join("random_forest/Social_Network_Ads.csv");
    let body = fs::read_to_string(&csv).map_err(|e| format!("{}: {e}", csv.display()))?;
    ensure!(body.starts_with("User ID,Gender,Age,EstimatedSalary,Purchased\n"), "csv header {body:.60}");
    Ok(())
}

fn dinosaurus() -> Check {
    let project = Project::replay_copy();
    let out = project.restore(DINOSAURUS);
    let t = &out.trace;
    let kinds: Vec<String> = t.steps.iter().map(|s| s.post.as_ref().map_or("-".into(), |p| p.category.to_string())).collect();
    ensure!(kinds == ["NameError", "Attribute"], "progression {kinds:?}");
    ensure!(t.initial.category.to_string() == "ModuleNotFound", "initial {}", t.initial.category);
    ensure!(t.final_status == FinalStatus::PartiallyRestored, "status {:?}", t.final_status);
    ensure!(t.cells_gained == 7 && t.delta_ratio == 0.5, "gained {} cells, delta {}", t.cells_gained, t.delta_ratio);
    let err = t.final_report.first_error.as_ref().ok_or("no final error")?;
    let code_position = out.notebook.cells[..err.cell_index].iter().filter(|c| c.is_code() && !c.is_inserted()).count();
    ensure!(code_position == 7, "AttributeError at original code cell {}", code_position + 1);
    ensure!(t.mutated && !t.semantically_verified, "inserted cell not flagged");
    Ok(())
}

fn defuse_agreement() -> Check {
    let dir = fixtures().join("defuse");
    let oracle = read_json(&dir.join("oracle.json"));
    let notebooks = notebooks_in(&dir);
    ensure!(notebooks.len() >= 25, "only {} def-use fixtures", notebooks.len());
    for p in &notebooks {
        let name = stem(p);
        let nb = Notebook::read(p).unwrap();
        let du = notebook_def_use(&nb).map_err(|e| format!("{name}: {e}"))?;
        let got = du.first_undefined().map(|(cell, n)| serde_json::json!({ "cell": cell, "name": n }));
        let want = &oracle[name.as_str()];
        ensure!(got.as_ref().unwrap_or(&Value::Null) == want, "{name}: analyzer {got:?}, interpreter {want}");
    }

    let ident = "[a-z][a-z0-9_]{0,6}".prop_filter("not a keyword or builtin", |s| {
        !nbrestore::analyzer::is_builtin(s) && !matches!(s.as_str(), "if" | "in" | "is" | "or" | "and" | "not" | "for" | "def" | "del" | "as" | "try" | "with" | "else" | "elif" | "pass" | "from" | "while" | "break" | "class" | "raise" | "yield" | "async" | "await" | "global" | "lambda" | "return" | "import" | "assert" | "except" | "finally" | "continue" | "nonlocal")
    });
    let mut runner = TestRunner::new(runner_config(128));
    runner
        .run(&(ident.clone(), ident.clone(), 0..3usize, 0..3usize), |(var, other, comp, filler)| {
            prop_assume!(var != other);
            let bodies = [
                format!("[{var} * 2 for {var} in range(3)]"),
                format!("{{{var}: 1 for {var} in 'ab'}}"),
                format!("sum({var} for {var} in range(4))"),
            ];
            let mut cells = vec![format!("{other} = {}", bodies[comp])];
            cells.extend((0..filler).map(|i| format!("{other} = {other} if {i} else {other}")));
            cells.push(format!("print({var})"));
            let nb = notebook(&cells);
            let du = notebook_def_use(&nb).unwrap();
            prop_assert_eq!(du.first_undefined(), Some((cells.len() - 1, var.clone())));

            let cells = vec![format!("{var} = 1"), format!("del {var}"), format!("{other} = {var}")];
            let du = notebook_def_use(&notebook(&cells)).unwrap();
            prop_assert_eq!(du.first_undefined(), Some((2, var.clone())));

            let cells = vec![format!("{var} = 1"), format!("del {var}\n{var} = 2"), format!("{other} = {var}")];
            prop_assert_eq!(notebook_def_use(&notebook(&cells)).unwrap().first_undefined(), None);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn notebook(cells: &[String]) -> Notebook {
    let spec: Vec<_> = cells.iter().map(|s| (nbrestore::notebook::CellKind::Code, s.as_str())).collect();
    Notebook::from_cells("prop.ipynb", &spec)
}

/// On-disk and in-memory state the restorer may touch.
#[derive(Debug, Clone, PartialEq)]
struct State {
    project: BTreeMap<PathBuf, Vec<u8>>,
    sandbox: BTreeMap<PathBuf, Vec<u8>>,
    installed: Vec<InstallRecord>,
    notebook: Vec<u8>,
}

/// Snapshots the state at every session it opens, then defers to the simulator.
struct Observed {
    project: PathBuf,
    sandbox: PathBuf,
    states: Arc<Mutex<Vec<State>>>,
}

impl Executor for Observed {
    fn open(&self, nb: &Notebook, env: &SandboxEnv, workdir: &Path) -> Result<Box<dyn Session>, HarnessError> {
        self.states.lock().unwrap().push(State {
            project: project_files(&self.project),
            sandbox: tree_snapshot(&self.sandbox),
            installed: env.installed.clone(),
            notebook: write_notebook(nb),
        });
        SimExecutor.open(nb, env, workdir)
    }
}

fn project_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut t = tree_snapshot(root);
    t.retain(|p, _| !p.extension().is_some_and(|e| e == "ipynb"));
    t
}

const SCENARIO_CELLS: &[&str] = &[
    "a = 1",
    "import alpha",
    "import beta\nb = 2",
    "import shiny",
    "import ghost_pkg",
    "import foo",
    "rows = open('data/in.csv').read()",
    "with open('out/run/log.txt', 'w') as f:\n    f.write('x')",
    "y = helper(2)",
    "z = counter + 1",
    "cfg = open('settings.yaml').read()",
    "img = imread('photo.png')",
    "# raises: ValueError: bad shape",
    "w = a + 1",
];

fn scenario() -> impl Strategy<Value = (Vec<usize>, bool, usize)> {
    (proptest::collection::vec(0..SCENARIO_CELLS.len(), 1..8), any::<bool>(), 1..6usize)
}

fn scenario_model() -> ScriptedModel {
    ScriptedModel::default()
        .package("foo", "foo-tools")
        .package("ghost_pkg", "ghost-pkg")
        .definition("helper", "def helper(v):\n    return v * 2")
        .file("csv", "k,v\n1,2\n")
        .file("yaml", "lr: 0.1\n")
}

fn scenario_catalogue() -> IndexProvisioner {
    catalogue(&[("alpha", "alpha"), ("beta", "beta"), ("shiny", "shiny"), ("foo-tools", "foo_tools")])
}

fn scenario_cells(picks: &[usize], fragile: bool) -> Vec<String> {
    let mut cells: Vec<String> = picks.iter().map(|&i| SCENARIO_CELLS[i].to_string()).collect();
    if fragile {
        cells[0].push_str("\n# breaks-if-installed: shiny");
    }
    cells
}

fn restore_observed(root: &Path, cells: &[String], max_iterations: usize) -> (RestoreOutcome, Vec<State>, State) {
    let project = root.join("project");
    let sandbox = root.join("sandbox");
    let nb = write_code_notebook(&project.join("nb.ipynb"), &cells.iter().map(String::as_str).collect::<Vec<_>>());
    let provisioner = scenario_catalogue();
    let mut env = provisioner.create(&sandbox, None).unwrap();
    let states = Arc::new(Mutex::new(Vec::new()));
    let executor = Observed {
        project: project.clone(),
        sandbox: sandbox.clone(),
        states: states.clone(),
    };
    let llm = LlmClient::live(LlmSettings::default(), Box::new(scenario_model()));
    let restorer = Restorer {
        executor: &executor,
        provisioner: &provisioner,
        llm: &llm,
        triage: TriageTable::builtin(),
        limits: ExecutionLimits::with_timeout(Duration::from_secs(10)),
        policy: RestorePolicy {
            max_iterations,
            ..RestorePolicy::default()
        },
    };
    let out = restorer.restore(&nb, &mut env).unwrap();
    let end = State {
        project: project_files(&project),
        sandbox: tree_snapshot(&sandbox),
        installed: env.installed.clone(),
        notebook: write_notebook(&out.notebook),
    };
    let states = states.lock().unwrap().clone();
    (out, states, end)
}

fn restoration_safety() -> Check {
    let mut runner = TestRunner::new(runner_config(96));
    runner
        .run(&scenario(), |(picks, fragile, max_iterations)| {
            let dir = tempfile::tempdir().unwrap();
            let cells = scenario_cells(&picks, fragile);
            let (out, states, end) = restore_observed(dir.path(), &cells, max_iterations);
            let t = &out.trace;

            prop_assert!(t.final_report.ratio >= t.initial.ratio, "ratio fell: {}", t.to_json());
            for s in &t.steps {
                if let (StepVerdict::Progress | StepVerdict::Shifted, Some(post)) = (s.verdict, &s.post) {
                    prop_assert!(post.ratio >= s.pre.ratio);
                }
            }

            prop_assert!(t.iterations <= max_iterations);
            prop_assert!(t.steps.len() <= max_iterations);

            if let Some(last) = t.steps.last() {
                let rolled_back = matches!(last.verdict, StepVerdict::Regression | StepVerdict::NoProgress | StepVerdict::Failed);
                if rolled_back {
                    let before = if last.post.is_some() { &states[states.len() - 2] } else { &states[states.len() - 1] };
                    prop_assert_eq!(&end, before, "rollback left changes behind: {}", t.to_json());
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    let mut runner = TestRunner::new(runner_config(32));
    runner
        .run(&scenario(), |(picks, fragile, max_iterations)| {
            let cells = scenario_cells(&picks, fragile);
            let dir = tempfile::tempdir().unwrap();
            let store = dir.path().join("store");
            let work = dir.path().join("work");
            let run = |llm: &LlmClient| {
                if work.exists() {
                    fs::remove_dir_all(&work).unwrap();
                }
                let project = work.join("project");
                let nb = write_code_notebook(&project.join("nb.ipynb"), &cells.iter().map(String::as_str).collect::<Vec<_>>());
                let provisioner = scenario_catalogue();
                let mut env = provisioner.create(&work.join("sandbox"), None).unwrap();
                let restorer = Restorer {
                    executor: &SimExecutor,
                    provisioner: &provisioner,
                    llm,
                    triage: TriageTable::builtin(),
                    limits: ExecutionLimits::with_timeout(Duration::from_secs(10)),
                    policy: RestorePolicy {
                        max_iterations,
                        ..RestorePolicy::default()
                    },
                };
                let out = restorer.restore(&nb, &mut env).unwrap();
                (out.trace.to_json(), write_notebook(&out.notebook), tree_snapshot(&work))
            };
            let recorded = run(&LlmClient::record(LlmSettings::default(), Box::new(scenario_model()), ReplayStore::new(&store)));
            let first = run(&LlmClient::replay(ReplayStore::new(&store)));
            let second = run(&LlmClient::replay(ReplayStore::new(&store)));
            prop_assert!(first == second, "replay runs differ");
            prop_assert!(first == recorded, "replay differs from the recorded run");
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    for rel in [RANDOM_FOREST, DINOSAURUS] {
        let runs: Vec<(String, Vec<u8>)> = (0..2)
            .map(|_| {
                let project = Project::replay_copy();
                let out = project.restore(rel);
                let root = project.dir.path().to_string_lossy().into_owned();
                (out.trace.to_json().replace(&root, "<root>"), write_notebook(&out.notebook))
            })
            .collect();
        ensure!(runs[0].0 == runs[1].0, "{rel}: replayed traces differ");
        ensure!(runs[0].1 == runs[1].1, "{rel}: restored notebooks differ");
    }
    Ok(())
}

fn corpus_results() -> Vec<NotebookResult> {
    let mut results: Vec<NotebookResult> = taxonomy_digests()
        .into_iter()
        .map(|(name, initial)| NotebookResult {
            notebook: PathBuf::from(format!("taxonomy/{name}.ipynb")),
            repo: None,
            stars: None,
            initial,
            restoration: None,
        })
        .collect();
    let project = Project::replay_copy();
    for rel in [RANDOM_FOREST, DINOSAURUS] {
        let mut r = NotebookResult::from_trace(project.restore(rel).trace);
        r.notebook = PathBuf::from(rel);
        if let Some(t) = r.restoration.as_mut() {
            t.notebook = r.notebook.clone();
        }
        results.push(r);
    }
    results
}

fn rendered(s: &CorpusSummary) -> [String; 4] {
    [s.to_json().unwrap(), s.table_csv().unwrap(), s.totals_csv().unwrap(), s.histogram_csv().unwrap()]
}

const EXPECTED_TABLE: &str = "\
Error Type,#,% w.r.t non-executable,% w.r.t dataset
FileNotFound,4,11.8,10.8
ModuleNotFound,4,11.8,10.8
NameError,3,8.8,8.1
Value,3,8.8,8.1
Attribute,2,5.9,5.4
ImportError,2,5.9,5.4
Index,2,5.9,5.4
Key,2,5.9,5.4
StdinNotImplemented,2,5.9,5.4
Syntax,2,5.9,5.4
Timeout,2,5.9,5.4
Type,2,5.9,5.4
AssertionError,1,2.9,2.7
ExecutorCrash,1,2.9,2.7
RecursionError,1,2.9,2.7
ZeroDivisionError,1,2.9,2.7
";

fn report_arithmetic() -> Check {
    let results = corpus_results();
    let triage = TriageTable::builtin();
    let summary = aggregate(&results, triage, None);
    let t = &summary.totals;

    ensure!(summary.analyzed == results.len(), "analyzed {}", summary.analyzed);
    ensure!(t.sum() == summary.analyzed, "totals {t:?} do not add up to {}", summary.analyzed);
    let table_sum: usize = summary.category_table.iter().map(|r| r.count).sum();
    ensure!(table_sum == t.non_executable(), "table rows sum to {table_sum}, {} non-executable", t.non_executable());
    ensure!(summary.partial_exec_hist.population() == summary.analyzed, "histogram holds {}", summary.partial_exec_hist.population());
    ensure!(summary.pathological_hist.population() == t.pathological, "pathological histogram mismatch");
    let r = &summary.restoration;
    ensure!(r.attempted == 2 && r.status_counts.values().sum::<usize>() == r.attempted, "restoration {r:?}");
    ensure!(r.final_hist.population() == r.attempted && r.improvement_hist.population() == r.attempted, "restoration histograms");

    let executable = results.iter().filter(|r| r.initial.is_fully_executable()).count();
    let mut by_class = [0usize; 4];
    for r in results.iter().filter(|r| !r.initial.is_fully_executable()) {
        match triage.triage(&r.initial.category) {
            Some(Restorability::Restorable) => by_class[0] += 1,
            Some(Restorability::Pathological) => by_class[1] += 1,
            Some(Restorability::NeedsInteraction) => by_class[2] += 1,
            Some(Restorability::NonAnalyzable) => by_class[3] += 1,
            None => return Err(format!("{} has no triage class", r.notebook.display())),
        }
    }
    ensure!(
        [t.executable, t.restorable, t.pathological, t.needs_interaction, t.non_analyzable]
            == [executable, by_class[0], by_class[1], by_class[2], by_class[3]],
        "totals {t:?}"
    );

    let csv = summary.table_csv().map_err(|e| e.to_string())?;
    ensure!(csv == EXPECTED_TABLE, "table csv:\n{csv}");
    let tenths: i64 = csv
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().replace('.', "").parse::<i64>().unwrap())
        .sum();
    let expected_tenths = (1000 * table_sum as i64) / summary.analyzed as i64;
    ensure!((tenths - expected_tenths).abs() <= summary.category_table.len() as i64, "dataset shares sum to {tenths}");

    let baseline = rendered(&summary);
    ensure!(baseline == rendered(&aggregate(&results, triage, None)), "aggregate is not repeatable");
    let mut runner = TestRunner::new(runner_config(48));
    runner
        .run(&Just(results.clone()).prop_shuffle(), |shuffled| {
            prop_assert!(rendered(&aggregate(&shuffled, triage, None)) == baseline);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn timeout_handling() -> Check {
    let dir = fixtures().join("timeout");
    let executor = ReplayExecutor::load(&dir.join("traces")).unwrap();
    let nb = Notebook::read(dir.join("infinite_loop.ipynb")).unwrap();
    let limit = Duration::from_secs(5);
    let grace = Duration::from_secs(2);
    let start = Instant::now();
    let report = execute_notebook(&nb, &SandboxEnv::detached(), &ExecutionLimits::with_timeout(limit), &executor)
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let d = ReportDigest::of(&report, TriageTable::builtin());
    ensure!(d.category.to_string() == "Timeout", "category {}", d.category);
    ensure!(
        TriageTable::builtin().triage(&d.category) == Some(Restorability::NonAnalyzable),
        "triage {:?}",
        TriageTable::builtin().triage(&d.category)
    );
    ensure!((d.cells_ok, d.total_code_cells) == (1, 3), "{}/{} cells", d.cells_ok, d.total_code_cells);
    ensure!(elapsed <= limit + grace, "took {elapsed:?}");
    Ok(())
}

fn main() {
    let checks: [(&str, CheckFn); 8] = [
        ("taxonomy fidelity", taxonomy_fidelity),
        ("partial-executability oracle equivalence", oracle_equivalence),
        ("random_forest notebook restoration", random_forest),
        ("dinosaurus notebook restoration", dinosaurus),
        ("def-use agreement with the interpreter", defuse_agreement),
        ("restoration safety properties", restoration_safety),
        ("report arithmetic", report_arithmetic),
        ("timeout handling", timeout_handling),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in checks {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(()) => println!("PASS {name} ({:.1}s)", start.elapsed().as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
