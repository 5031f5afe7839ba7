mod support;

use std::path::Path;
use std::sync::atomic::Ordering;
use std::time::Duration;

use nbrestore::classify::TriageTable;
use nbrestore::harness::{ExecutionLimits, InstallOutcome, IndexProvisioner, Provisioner, SandboxEnv};
use nbrestore::llm::{LlmClient, LlmSettings};
use nbrestore::restore::{
    ActionKind, ActionOutcome, FinalStatus, RestoreOutcome, RestorePolicy, Restorer, StepVerdict, StopReason,
};
use support::{catalogue, tree_snapshot, write_code_notebook, ScriptedModel, SimExecutor};

struct Rig {
    dir: tempfile::TempDir,
    provisioner: IndexProvisioner,
    model: ScriptedModel,
    settings: LlmSettings,
    policy: RestorePolicy,
}

impl Rig {
    fn new(packages: &[(&str, &str)], model: ScriptedModel) -> Self {
        Rig {
            dir: tempfile::tempdir().unwrap(),
            provisioner: catalogue(packages),
            model,
            settings: LlmSettings::default(),
            policy: RestorePolicy::default(),
        }
    }

    fn project(&self) -> std::path::PathBuf {
        self.dir.path().join("project")
    }

    fn env(&self, preinstalled: &[&str]) -> SandboxEnv {
        let mut env = self.provisioner.create(&self.dir.path().join("sandbox"), None).unwrap();
        for p in preinstalled {
            assert_eq!(self.provisioner.install(&mut env, p), InstallOutcome::Success);
        }
        env
    }

    fn restore(&self, cells: &[&str], env: &mut SandboxEnv) -> RestoreOutcome {
        let nb = write_code_notebook(&self.project().join("nb.ipynb"), cells);
        let llm = LlmClient::live(self.settings.clone(), Box::new(self.model.clone()));
        let restorer = Restorer {
            executor: &SimExecutor,
            provisioner: &self.provisioner,
            llm: &llm,
            triage: TriageTable::builtin(),
            limits: ExecutionLimits::with_timeout(Duration::from_secs(10)),
            policy: self.policy.clone(),
        };
        restorer.restore(&nb, env).unwrap()
    }

    fn llm_calls(&self) -> usize {
        self.model.calls.load(Ordering::SeqCst)
    }
}

#[test]
fn missing_csv_is_synthesized() {
    let rig = Rig::new(&[("pandas", "pandas")], ScriptedModel::default().file("csv", "age,salary\n30,5000\n"));
    let mut env = rig.env(&["pandas"]);
    let out = rig.restore(
        &["import pandas as pd", "df = pd.read_csv('data/ads.csv')", "x = df.shape"],
        &mut env,
    );
    let t = &out.trace;
    assert_eq!(t.final_status, FinalStatus::FullyRestored);
    assert_eq!((t.initial.cells_ok, t.final_report.cells_ok), (1, 3));
    assert_eq!(t.cells_gained, 2);
    assert_eq!(t.steps.len(), 1);
    assert_eq!(t.steps[0].action.kind, ActionKind::SynthInputFile);
    assert!(t.steps[0].action.prompt_fingerprint.is_some());
    assert!(!t.mutated && t.semantically_verified);
    let written = std::fs::read_to_string(rig.project().join("data/ads.csv")).unwrap();
    assert_eq!(written, "age,salary\n30,5000\n");
}

#[test]
fn wrong_module_name_is_corrected_by_the_model() {
    let rig = Rig::new(&[("opencv-python", "cv2")], ScriptedModel::default().package("cv2", "opencv-python"));
    let mut env = rig.env(&[]);
    let out = rig.restore(&["import cv2", "img = cv2.imread"], &mut env);
    let t = &out.trace;
    assert_eq!(t.final_status, FinalStatus::FullyRestored);
    assert_eq!(t.steps[0].action.kind, ActionKind::LlmModuleName);
    assert_eq!(t.steps[0].action.artifacts.packages, vec!["opencv-python".to_string()]);
    assert_eq!(rig.llm_calls(), 1);
    assert!(env.has_module("cv2"));
}

#[test]
fn direct_install_needs_no_model() {
    let rig = Rig::new(&[("numpy", "numpy")], ScriptedModel::default());
    let mut env = rig.env(&[]);
    let out = rig.restore(&["import numpy as np", "a = np.zeros"], &mut env);
    assert_eq!(out.trace.final_status, FinalStatus::FullyRestored);
    assert_eq!(out.trace.steps[0].action.kind, ActionKind::InstallModule);
    assert_eq!(rig.llm_calls(), 0);
}

#[test]
fn name_error_inserts_definition_and_suggests_reorder() {
    let rig = Rig::new(
        &[],
        ScriptedModel::default().definition("helper", "def helper(v):\n    return v * 2"),
    );
    let mut env = rig.env(&[]);
    let out = rig.restore(&["y = helper(2)", "def helper(v):\n    return v * 2", "z = y + 1"], &mut env);
    let t = &out.trace;
    assert_eq!(t.final_status, FinalStatus::FullyRestored);
    assert_eq!((t.final_report.cells_ok, t.final_report.total_code_cells), (3, 3));
    assert!(t.mutated && !t.semantically_verified);
    assert_eq!(t.reorder_suggestions.len(), 1);
    assert_eq!((t.reorder_suggestions[0].use_cell, t.reorder_suggestions[0].def_cell), (0, 1));
    assert_eq!(out.notebook.cells.len(), 4);
    assert!(out.notebook.cells[0].is_inserted());

    let written = out.write(&rig.dir.path().join("traces")).unwrap();
    assert_eq!(written.len(), 2);
    assert!(written[1].to_string_lossy().ends_with("nb.restored.ipynb"));
}

#[test]
fn image_inputs_are_not_synthesized() {
    let rig = Rig::new(&[], ScriptedModel::default());
    let mut env = rig.env(&[]);
    let before = tree_snapshot(&rig.dir.path().join("sandbox"));
    let out = rig.restore(&["img = imread('cat.png')"], &mut env);
    let t = &out.trace;
    assert_eq!(t.final_status, FinalStatus::Unrestored);
    assert_eq!(t.stop_reason, StopReason::StrategyFailed);
    assert_eq!(t.steps[0].action.outcome, ActionOutcome::StrategyFailed);
    assert_eq!(t.steps[0].verdict, StepVerdict::Failed);
    assert_eq!(rig.llm_calls(), 0);
    assert!(!rig.project().join("cat.png").exists());
    assert_eq!(tree_snapshot(&rig.dir.path().join("sandbox")), before);
}

#[test]
fn syntax_errors_are_left_alone() {
    let rig = Rig::new(&[], ScriptedModel::default());
    let mut env = rig.env(&[]);
    let out = rig.restore(&["x = 1", "y = (", "z = 2"], &mut env);
    assert_eq!(out.trace.final_status, FinalStatus::UnrestorablePathological);
    assert_eq!(out.trace.stop_reason, StopReason::NotRestorable);
    assert!(out.trace.steps.is_empty());
    assert_eq!(rig.llm_calls(), 0);
}

#[test]
fn regressing_install_is_rolled_back() {
    let rig = Rig::new(&[("shiny", "shiny")], ScriptedModel::default());
    let mut env = rig.env(&[]);
    let sandbox = rig.dir.path().join("sandbox");
    let before = tree_snapshot(&sandbox);
    let out = rig.restore(&["x = 1\n# breaks-if-installed: shiny", "import shiny"], &mut env);
    let t = &out.trace;
    assert_eq!(t.steps[0].verdict, StepVerdict::Regression);
    assert_eq!(t.stop_reason, StopReason::Regression);
    assert_eq!(t.final_status, FinalStatus::Unrestored);
    assert_eq!(t.final_report, t.initial);
    assert!(!env.has_module("shiny"));
    assert!(env.installed.is_empty());
    assert_eq!(tree_snapshot(&sandbox), before);
}

#[test]
fn useless_package_is_rolled_back() {
    let rig = Rig::new(&[("foo-tools", "foo_tools")], ScriptedModel::default().package("foo", "foo-tools"));
    let mut env = rig.env(&[]);
    let out = rig.restore(&["import foo"], &mut env);
    let t = &out.trace;
    assert_eq!(t.steps[0].verdict, StepVerdict::NoProgress);
    assert_eq!(t.stop_reason, StopReason::NoProgress);
    assert!(!env.has_module("foo_tools"));
}

#[test]
fn exhausted_budget_stops_the_loop() {
    let mut rig = Rig::new(&[], ScriptedModel::default());
    rig.settings.max_calls = Some(0);
    let mut env = rig.env(&[]);
    let out = rig.restore(&["import nowhere"], &mut env);
    assert_eq!(out.trace.final_status, FinalStatus::BudgetExhausted);
    assert_eq!(out.trace.stop_reason, StopReason::Budget);
    assert_eq!(rig.llm_calls(), 0);
}

#[test]
fn missing_output_directory_is_created() {
    let rig = Rig::new(&[], ScriptedModel::default());
    let mut env = rig.env(&[]);
    let out = rig.restore(&["with open('out/run1/result.txt', 'w') as f:\n    f.write('x')"], &mut env);
    assert_eq!(out.trace.final_status, FinalStatus::FullyRestored);
    assert_eq!(out.trace.steps[0].action.kind, ActionKind::CreateDirectory);
    assert_eq!(out.trace.steps[0].action.artifacts.dirs, vec![rig.project().join("out")]);
    assert!(Path::new(&rig.project().join("out/run1")).is_dir());
}

#[test]
fn iteration_cap_is_respected() {
    let mut rig = Rig::new(&[("a", "a"), ("b", "b"), ("c", "c")], ScriptedModel::default());
    rig.policy.max_iterations = 2;
    let mut env = rig.env(&[]);
    let out = rig.restore(&["import a", "import b", "import c"], &mut env);
    let t = &out.trace;
    assert_eq!(t.iterations, 2);
    assert_eq!(t.stop_reason, StopReason::IterationCap);
    assert_eq!(t.final_status, FinalStatus::PartiallyRestored);
    assert_eq!(t.cells_gained, 2);
}
