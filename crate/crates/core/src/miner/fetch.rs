use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use crate::harness::discover_requirements;

use super::{find_notebooks, MinerError, RepoRecord};

/// Written inside each fetched working tree; holds the checked-out commit.
pub const FETCH_MARKER: &str = ".nbrestore-fetch";

pub trait Fetcher: Send + Sync {
    /// Materializes `identifier` at `dest` and returns the checked-out commit hash.
    fn fetch(&self, identifier: &str, dest: &Path) -> Result<String, MinerError>;
}

/// Shallow `git clone` of the default branch from `{base}/{owner}/{name}`.
/// The base may be a URL or a local mirror directory.
#[derive(Debug, Clone)]
pub struct GitFetcher {
    pub base: String,
    pub git: PathBuf,
}

impl Default for GitFetcher {
    fn default() -> Self {
        GitFetcher {
            base: "https://github.com".into(),
            git: "git".into(),
        }
    }
}

impl GitFetcher {
    pub fn with_base(base: impl Into<String>) -> Self {
        GitFetcher {
            base: base.into(),
            ..Self::default()
        }
    }

    fn git(&self, args: &[&str], cwd: Option<&Path>) -> Result<String, String> {
        let mut cmd = Command::new(&self.git);
        cmd.args(args).env("GIT_TERMINAL_PROMPT", "0");
        if let Some(dir) = cwd {
            cmd.current_dir(dir);
        }
        let out = cmd.output().map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
        } else {
            Err(String::from_utf8_lossy(&out.stderr).trim().to_string())
        }
    }
}

impl Fetcher for GitFetcher {
    fn fetch(&self, identifier: &str, dest: &Path) -> Result<String, MinerError> {
        let failure = |detail: String| MinerError::CloneFailure {
            repo: identifier.to_string(),
            detail,
        };
        let url = format!("{}/{}", self.base.trim_end_matches('/'), identifier);
        if dest.exists() {
            fs::remove_dir_all(dest)?;
        }
        let dest_str = dest.to_string_lossy();
        self.git(&["clone", "--quiet", "--depth", "1", &url, &dest_str], None)
            .map_err(failure)?;
        self.git(&["rev-parse", "HEAD"], Some(dest)).map_err(failure)
    }
}

/// Fetches `stub` into `corpus_root/<owner>__<name>/` unless a matching
/// checkout is already there, then discovers notebooks and manifests.
pub fn fetch_repo(fetcher: &dyn Fetcher, stub: &RepoRecord, corpus_root: &Path) -> Result<RepoRecord, MinerError> {
    let dest = corpus_root.join(stub.local_dir_name());
    let marker = dest.join(FETCH_MARKER);
    let cached = fs::read_to_string(&marker).ok().map(|s| s.trim().to_string());
    let hash = match cached {
        Some(h) if stub.content_hash.as_deref().is_none_or(|want| want == h) => {
            tracing::debug!(repo = %stub.identifier, "fetch cache hit");
            h
        }
        _ => {
            fs::create_dir_all(corpus_root)?;
            let h = fetcher.fetch(&stub.identifier, &dest)?;
            fs::write(&marker, format!("{h}\n"))?;
            h
        }
    };

    let notebooks = find_notebooks(&dest)
        .into_iter()
        .filter_map(|p| p.strip_prefix(&dest).ok().map(Path::to_path_buf))
        .collect();
    Ok(RepoRecord {
        identifier: stub.identifier.clone(),
        stars: stub.stars,
        clone_path: Some(dest.clone()),
        content_hash: Some(hash),
        notebooks,
        manifests: discover_requirements(&dest),
    })
}
