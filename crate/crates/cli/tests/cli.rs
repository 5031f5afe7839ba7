use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn nbrestore(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nbrestore")).args(args).output().unwrap()
}

fn copy_tree(from: &Path, to: &Path) {
    for entry in walkdir::WalkDir::new(from) {
        let entry = entry.unwrap();
        let dest = to.join(entry.path().strip_prefix(from).unwrap());
        if entry.file_type().is_dir() {
            fs::create_dir_all(&dest).unwrap();
        } else {
            fs::copy(entry.path(), &dest).unwrap();
        }
    }
}

fn lines(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&out.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn restore_random_forest_from_replay() {
    let dir = tempfile::tempdir().unwrap();
    copy_tree(&fixtures().join("replay"), dir.path());
    let root = dir.path().to_str().unwrap();
    let nb = dir.path().join("random_forest/random_forest_algorithm.ipynb");
    let out_dir = dir.path().join("out");
    let out = nbrestore(&["--replay", root, "restore", nb.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let line = &lines(&out)[0];
    assert_eq!(line["final_status"], "fully_restored");
    assert_eq!(line["final"], "24/24");

    let trace: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("traces/random_forest_algorithm.restore.json")).unwrap())
            .unwrap();
    assert_eq!(trace["final_status"], "fully_restored");
    assert!(dir.path().join("random_forest/Social_Network_Ads.csv").is_file());

    let report_dir = dir.path().join("report");
    let out = nbrestore(&["report", out_dir.to_str().unwrap(), "--out", report_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(report_dir.join("error_table.csv")).unwrap();
    assert_eq!(table, "Error Type,#,% w.r.t non-executable,% w.r.t dataset\nFileNotFound,1,100.0,100.0\n");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = nbrestore(&["--no-such-flag", "scan", "x.ipynb"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--no-such-flag"));
    assert_eq!(nbrestore(&["exec"]).status.code(), Some(2));
}

#[test]
fn exec_times_out_on_infinite_loop() {
    let timeout = fixtures().join("timeout");
    let nb = timeout.join("infinite_loop.ipynb");
    let start = Instant::now();
    let out = nbrestore(&["--replay", timeout.to_str().unwrap(), "--timeout", "5s", "exec", nb.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(start.elapsed() < Duration::from_secs(8));
    let line = &lines(&out)[0];
    assert_eq!(line["category"], "Timeout");
    assert_eq!(line["triage"], "non_analyzable");
}

#[test]
fn missing_trace_is_a_pipeline_error() {
    let dir = tempfile::tempdir().unwrap();
    let src = fixtures().join("taxonomy/exec_arithmetic.ipynb");
    let nb = dir.path().join("copy.ipynb");
    fs::copy(&src, &nb).unwrap();
    fs::write(&nb, fs::read_to_string(&nb).unwrap().replace("x * 21", "x * 20")).unwrap();
    let out = nbrestore(&["--replay", fixtures().join("taxonomy").to_str().unwrap(), "exec", nb.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn scan_reports_compile_errors() {
    let nb = fixtures().join("taxonomy/syntax_bad_def.ipynb");
    let out = nbrestore(&["scan", nb.to_str().unwrap()]);
    assert!(out.status.success());
    let line = &lines(&out)[0];
    assert_eq!(line["screening"]["status"], "ok");
    assert_eq!(line["compile"]["ok"], false);
    assert_eq!(line["compile"]["location"]["cell"], 1);
}

#[test]
fn offline_mine_uses_the_index_and_a_local_mirror() {
    if Command::new("git").arg("--version").output().is_err() {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let mirror = dir.path().join("mirror");
    for (repo, notebooks) in [("alice/plots", 3), ("bob/models", 5)] {
        let r = mirror.join(repo);
        fs::create_dir_all(&r).unwrap();
        for i in 0..notebooks {
            fs::write(r.join(format!("nb{i}.ipynb")), "{}").unwrap();
        }
        let git = |args: &[&str]| {
            let ok = Command::new("git")
                .args(["-c", "user.name=t", "-c", "user.email=t@t", "-c", "init.defaultBranch=main"])
                .args(args)
                .current_dir(&r)
                .output()
                .unwrap();
            assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
        };
        git(&["init", "-q"]);
        git(&["add", "."]);
        git(&["commit", "-qm", "init"]);
    }
    let index = dir.path().join("index.json");
    fs::write(
        &index,
        r#"[{"identifier": "alice/plots", "stars": 12}, {"identifier": "bob/models", "stars": 1500}]"#,
    )
    .unwrap();
    let config = dir.path().join("pipeline.toml");
    fs::write(&config, format!("[miner]\nclone_base = \"{}\"\nnotebook_fraction = 0.5\n", mirror.display())).unwrap();
    let corpus = dir.path().join("corpus");
    let out = nbrestore(&[
        "--config",
        config.to_str().unwrap(),
        "--offline",
        "--seed",
        "3",
        "mine",
        "--index",
        index.to_str().unwrap(),
        "--out",
        corpus.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let line = &lines(&out)[0];
    assert_eq!(line["repos"], 2);
    assert_eq!(line["notebooks"], 8);
    assert_eq!(line["sampled"], 4);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(corpus.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["repos"][0]["repo"], "bob/models");
    assert_eq!(manifest["repos"][0]["tier"], ">=1000");
}
