use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};
use wait_timeout::ChildExt;

use super::requirements::{discover_requirements, parse_manifest, RequirementSource};
use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstallOutcome {
    Success,
    NotFound,
    Conflict,
    NetworkError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstallRecord {
    pub spec: String,
    pub outcome: InstallOutcome,
    /// Importable top-level modules the package provides.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub modules: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxEnv {
    pub root: PathBuf,
    pub interpreter_tag: String,
    pub interpreter: PathBuf,
    pub installed: Vec<InstallRecord>,
    pub repo: Option<String>,
    #[serde(default)]
    pub manifests: Vec<RequirementSource>,
}

impl SandboxEnv {
    /// An environment with no root of its own, running the system interpreter.
    pub fn detached() -> Self {
        SandboxEnv {
            root: PathBuf::new(),
            interpreter_tag: "python3".into(),
            interpreter: PathBuf::from("python3"),
            installed: Vec::new(),
            repo: None,
            manifests: Vec::new(),
        }
    }

    pub fn has_module(&self, module: &str) -> bool {
        self.installed
            .iter()
            .filter(|r| r.outcome == InstallOutcome::Success)
            .any(|r| r.modules.iter().any(|m| m == module) || package_name(&r.spec) == normalize(module))
    }

    pub fn snapshot(&self) -> usize {
        self.installed.len()
    }
}

/// Distribution name of a requirement spec, normalized.
pub(crate) fn package_name(spec: &str) -> String {
    let end = spec
        .find(|c: char| !(c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.'))
        .unwrap_or(spec.len());
    normalize(&spec[..end])
}

fn normalize(name: &str) -> String {
    name.trim().to_ascii_lowercase().replace(['-', '.'], "_")
}

pub trait Provisioner: Send + Sync {
    fn create(&self, root: &Path, repo: Option<&str>) -> Result<SandboxEnv, HarnessError>;

    /// One installation attempt; returns the outcome and provided modules.
    fn install_once(&self, env: &SandboxEnv, spec: &str) -> (InstallOutcome, Vec<String>);

    fn uninstall(&self, env: &SandboxEnv, spec: &str);

    /// Installs `spec`, retrying once on a network failure, and logs the result.
    fn install(&self, env: &mut SandboxEnv, spec: &str) -> InstallOutcome {
        let (mut outcome, mut modules) = self.install_once(env, spec);
        if outcome == InstallOutcome::NetworkError {
            debug!(spec, "retrying after network error");
            (outcome, modules) = self.install_once(env, spec);
        }
        env.installed.push(InstallRecord {
            spec: spec.to_string(),
            outcome,
            modules,
        });
        outcome
    }

    /// Undoes successful installs logged after `snapshot`.
    fn rollback(&self, env: &mut SandboxEnv, snapshot: usize) {
        let undone: Vec<InstallRecord> = env.installed.drain(snapshot.min(env.installed.len())..).collect();
        for rec in undone.iter().rev().filter(|r| r.outcome == InstallOutcome::Success) {
            let still_needed = env
                .installed
                .iter()
                .any(|r| r.outcome == InstallOutcome::Success && package_name(&r.spec) == package_name(&rec.spec));
            if !still_needed {
                self.uninstall(env, &rec.spec);
            }
        }
    }
}

/// Creates the environment and installs every declared dependency best-effort.
pub fn prepare_sandbox(
    repo_root: &Path,
    sandbox_root: &Path,
    repo: Option<&str>,
    provisioner: &dyn Provisioner,
) -> Result<SandboxEnv, HarnessError> {
    let mut env = provisioner.create(sandbox_root, repo)?;
    env.manifests = discover_requirements(repo_root);
    let specs: Vec<String> = env.manifests.iter().flat_map(parse_manifest).collect();
    for spec in specs {
        let outcome = provisioner.install(&mut env, &spec);
        if outcome != InstallOutcome::Success {
            warn!(spec = %spec, ?outcome, "dependency not installed");
        }
    }
    Ok(env)
}

/// Real virtual environments created with `python -m venv` and populated by pip.
#[derive(Debug, Clone)]
pub struct VenvProvisioner {
    pub base_python: PathBuf,
    pub pip_args: Vec<String>,
    pub install_timeout: Duration,
    pub system_site_packages: bool,
}

impl Default for VenvProvisioner {
    fn default() -> Self {
        VenvProvisioner {
            base_python: PathBuf::from("python3"),
            pip_args: Vec::new(),
            install_timeout: Duration::from_secs(120),
            system_site_packages: false,
        }
    }
}

const NOT_FOUND_MARKERS: &[&str] = &[
    "No matching distribution found",
    "Could not find a version that satisfies",
];
const CONFLICT_MARKERS: &[&str] = &["ResolutionImpossible", "conflicting dependencies", "conflict is caused by"];
const NETWORK_MARKERS: &[&str] = &[
    "Failed to establish a new connection",
    "Temporary failure in name resolution",
    "Network is unreachable",
    "Read timed out",
    "ConnectionError",
];

fn classify_pip_output(log: &str) -> InstallOutcome {
    let has = |markers: &[&str]| markers.iter().any(|m| log.contains(m));
    if has(NETWORK_MARKERS) {
        InstallOutcome::NetworkError
    } else if has(CONFLICT_MARKERS) {
        InstallOutcome::Conflict
    } else if has(NOT_FOUND_MARKERS) {
        InstallOutcome::NotFound
    } else {
        InstallOutcome::Conflict
    }
}

const TOP_LEVEL_PROBE: &str = r#"
import sys
from importlib import metadata
try:
    dist = metadata.distribution(sys.argv[1])
except metadata.PackageNotFoundError:
    sys.exit(0)
top = dist.read_text("top_level.txt")
if top:
    print("\n".join(t for t in top.split() if t))
else:
    seen = set()
    for f in dist.files or []:
        head = f.parts[0]
        if head.endswith(".dist-info") or head.endswith(".data") or head == "..":
            continue
        name = head[:-3] if head.endswith(".py") else head
        if name not in seen:
            seen.add(name)
            print(name)
"#;

impl VenvProvisioner {
    fn run_logged(&self, mut cmd: Command, log_path: &Path, timeout: Duration) -> std::io::Result<(Option<i32>, String)> {
        let log = File::create(log_path)?;
        cmd.stdin(Stdio::null()).stdout(log.try_clone()?).stderr(log);
        let mut child = cmd.spawn()?;
        let status = match child.wait_timeout(timeout)? {
            Some(s) => s.code(),
            None => {
                let _ = child.kill();
                let _ = child.wait();
                None
            }
        };
        Ok((status, fs::read_to_string(log_path).unwrap_or_default()))
    }

    fn log_dir(env: &SandboxEnv) -> PathBuf {
        env.root.join("nbrestore-logs")
    }
}

fn venv_python(root: &Path) -> PathBuf {
    if cfg!(windows) {
        root.join("Scripts").join("python.exe")
    } else {
        root.join("bin").join("python")
    }
}

impl Provisioner for VenvProvisioner {
    fn create(&self, root: &Path, repo: Option<&str>) -> Result<SandboxEnv, HarnessError> {
        let fail = |detail: String| HarnessError::EnvCreationFailed {
            root: root.to_path_buf(),
            detail,
        };
        let mut cmd = Command::new(&self.base_python);
        cmd.args(["-m", "venv"]);
        if self.system_site_packages {
            cmd.arg("--system-site-packages");
        }
        let out = cmd.arg(root).output().map_err(|e| fail(e.to_string()))?;
        if !out.status.success() {
            return Err(fail(String::from_utf8_lossy(&out.stderr).trim().to_string()));
        }
        let interpreter = venv_python(root);
        let version = Command::new(&interpreter)
            .args(["-c", "import sys; print('python%d.%d' % sys.version_info[:2])"])
            .output()
            .map_err(|e| fail(e.to_string()))?;
        fs::create_dir_all(root.join("nbrestore-logs"))?;
        Ok(SandboxEnv {
            root: root.to_path_buf(),
            interpreter_tag: String::from_utf8_lossy(&version.stdout).trim().to_string(),
            interpreter,
            installed: Vec::new(),
            repo: repo.map(str::to_string),
            manifests: Vec::new(),
        })
    }

    fn install_once(&self, env: &SandboxEnv, spec: &str) -> (InstallOutcome, Vec<String>) {
        let mut cmd = Command::new(&env.interpreter);
        cmd.args(["-m", "pip", "install", "--disable-pip-version-check", "--no-input"])
            .args(&self.pip_args)
            .arg(spec);
        let log_path = Self::log_dir(env).join(format!("install-{}.log", package_name(spec)));
        let (code, log) = match self.run_logged(cmd, &log_path, self.install_timeout) {
            Ok(r) => r,
            Err(e) => {
                warn!(spec, error = %e, "pip did not start");
                return (InstallOutcome::Conflict, Vec::new());
            }
        };
        match code {
            Some(0) => {
                let probe = Command::new(&env.interpreter)
                    .args(["-c", TOP_LEVEL_PROBE, &package_name(spec)])
                    .output();
                let mut modules: Vec<String> = probe
                    .map(|o| String::from_utf8_lossy(&o.stdout).lines().map(str::to_string).collect())
                    .unwrap_or_default();
                if modules.is_empty() {
                    modules.push(package_name(spec));
                }
                (InstallOutcome::Success, modules)
            }
            None => (InstallOutcome::NetworkError, Vec::new()),
            Some(_) => (classify_pip_output(&log), Vec::new()),
        }
    }

    fn uninstall(&self, env: &SandboxEnv, spec: &str) {
        let status = Command::new(&env.interpreter)
            .args(["-m", "pip", "uninstall", "-y", &package_name(spec)])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status();
        if !matches!(status, Ok(s) if s.success()) {
            warn!(spec, "uninstall failed during rollback");
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IndexPackage {
    #[serde(default)]
    pub versions: Vec<String>,
    /// Top-level modules; defaults to the normalized package name.
    #[serde(default)]
    pub modules: Vec<String>,
    /// Packages that cannot be installed alongside this one.
    #[serde(default)]
    pub conflicts_with: Vec<String>,
    /// Number of network failures to report before succeeding.
    #[serde(default)]
    pub flaky: u32,
}

/// Installs from a local package catalogue by writing marker files into the
/// sandbox. Deterministic and offline.
#[derive(Debug, Default)]
pub struct IndexProvisioner {
    packages: BTreeMap<String, IndexPackage>,
    interpreter: PathBuf,
    failures_left: Mutex<HashMap<String, u32>>,
}

impl IndexProvisioner {
    pub fn new(packages: BTreeMap<String, IndexPackage>) -> Self {
        let failures_left = packages
            .iter()
            .filter(|(_, p)| p.flaky > 0)
            .map(|(n, p)| (normalize(n), p.flaky))
            .collect();
        IndexProvisioner {
            packages: packages.into_iter().map(|(n, p)| (normalize(&n), p)).collect(),
            interpreter: PathBuf::from("python3"),
            failures_left: Mutex::new(failures_left),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        #[derive(Deserialize)]
        struct IndexFile {
            packages: BTreeMap<String, IndexPackage>,
        }
        let text = fs::read_to_string(path)?;
        let file: IndexFile = serde_json::from_str(&text).map_err(|e| HarnessError::BadTrace {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        Ok(Self::new(file.packages))
    }

    pub fn with_interpreter(mut self, interpreter: impl Into<PathBuf>) -> Self {
        self.interpreter = interpreter.into();
        self
    }

    fn site(env: &SandboxEnv) -> PathBuf {
        env.root.join("site-packages")
    }
}

fn pinned_version(spec: &str) -> Option<&str> {
    spec.split_once("==").map(|(_, v)| v.trim())
}

impl Provisioner for IndexProvisioner {
    fn create(&self, root: &Path, repo: Option<&str>) -> Result<SandboxEnv, HarnessError> {
        fs::create_dir_all(root.join("site-packages")).map_err(|e| HarnessError::EnvCreationFailed {
            root: root.to_path_buf(),
            detail: e.to_string(),
        })?;
        Ok(SandboxEnv {
            root: root.to_path_buf(),
            interpreter_tag: "python3".into(),
            interpreter: self.interpreter.clone(),
            installed: Vec::new(),
            repo: repo.map(str::to_string),
            manifests: Vec::new(),
        })
    }

    fn install_once(&self, env: &SandboxEnv, spec: &str) -> (InstallOutcome, Vec<String>) {
        let name = package_name(spec);
        let Some(pkg) = self.packages.get(&name) else {
            return (InstallOutcome::NotFound, Vec::new());
        };
        {
            let mut left = self.failures_left.lock().expect("failure counter lock");
            if let Some(n) = left.get_mut(&name).filter(|n| **n > 0) {
                *n -= 1;
                return (InstallOutcome::NetworkError, Vec::new());
            }
        }
        let version = match pinned_version(spec) {
            Some(v) if !pkg.versions.iter().any(|have| have == v) => return (InstallOutcome::NotFound, Vec::new()),
            Some(v) => v.to_string(),
            None => pkg.versions.last().cloned().unwrap_or_else(|| "0".into()),
        };
        let clash = pkg.conflicts_with.iter().any(|c| {
            env.installed
                .iter()
                .any(|r| r.outcome == InstallOutcome::Success && package_name(&r.spec) == normalize(c))
        });
        if clash {
            return (InstallOutcome::Conflict, Vec::new());
        }
        let modules = if pkg.modules.is_empty() {
            vec![name.clone()]
        } else {
            pkg.modules.clone()
        };
        let marker = serde_json::json!({"name": name, "version": version, "modules": modules});
        if let Err(e) = fs::write(Self::site(env).join(format!("{name}.json")), marker.to_string()) {
            warn!(spec, error = %e, "cannot record install");
            return (InstallOutcome::Conflict, Vec::new());
        }
        (InstallOutcome::Success, modules)
    }

    fn uninstall(&self, env: &SandboxEnv, spec: &str) {
        let _ = fs::remove_file(Self::site(env).join(format!("{}.json", package_name(spec))));
    }
}
