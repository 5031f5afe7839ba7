//! Star-stratified repository sampling, fetching and notebook discovery.

mod fetch;
mod search;

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::harness::RequirementSource;

pub use fetch::{fetch_repo, Fetcher, GitFetcher, FETCH_MARKER};
pub use search::{FixtureIndex, GitHubSearch, IndexEntry, QueryFilters, SearchBackend, SearchPage};

#[derive(Debug, Error)]
pub enum MinerError {
    #[error("invalid tier table: {0}")]
    TierConfig(String),
    #[error("rate limited; retry after {retry_after_secs} s")]
    RateLimited { retry_after_secs: u64 },
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("search failed: {0}")]
    Search(String),
    #[error("clone of {repo} failed: {detail}")]
    CloneFailure { repo: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Inclusive star interval with a sampling cap. `max = None` is unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StarTier {
    pub min: u64,
    #[serde(default)]
    pub max: Option<u64>,
    pub cap: usize,
}

impl StarTier {
    pub const fn new(min: u64, max: Option<u64>, cap: usize) -> Self {
        StarTier { min, max, cap }
    }

    pub fn contains(&self, stars: u64) -> bool {
        stars >= self.min && self.max.is_none_or(|m| stars <= m)
    }

    /// `stars:` qualifier for the hosting-service search syntax.
    pub fn query_range(&self) -> String {
        match self.max {
            Some(max) => format!("{}..{}", self.min, max),
            None => format!(">={}", self.min),
        }
    }
}

impl fmt::Display for StarTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.max {
            Some(max) => write!(f, "{}-{}", self.min, max),
            None => write!(f, ">={}", self.min),
        }
    }
}

/// Logarithmically sized tiers from 1000+ stars down to 4-9, 1000 repos each.
pub fn default_tiers() -> Vec<StarTier> {
    const BOUNDS: [(u64, Option<u64>); 22] = [
        (1000, None),
        (500, Some(999)),
        (300, Some(499)),
        (200, Some(299)),
        (150, Some(199)),
        (125, Some(149)),
        (100, Some(124)),
        (90, Some(99)),
        (80, Some(89)),
        (70, Some(79)),
        (60, Some(69)),
        (55, Some(59)),
        (50, Some(54)),
        (45, Some(49)),
        (40, Some(44)),
        (35, Some(39)),
        (30, Some(34)),
        (25, Some(29)),
        (20, Some(24)),
        (15, Some(19)),
        (10, Some(14)),
        (4, Some(9)),
    ];
    BOUNDS.iter().map(|&(min, max)| StarTier::new(min, max, 1000)).collect()
}

/// Checks that tiers are well-formed, disjoint and listed in descending order.
pub fn validate_tiers(tiers: &[StarTier]) -> Result<(), MinerError> {
    for (i, t) in tiers.iter().enumerate() {
        if t.max.is_some_and(|m| m < t.min) {
            return Err(MinerError::TierConfig(format!("tier {t} has max below min")));
        }
        if i > 0 && t.max.is_none() {
            return Err(MinerError::TierConfig(format!("only the first tier may be unbounded, found {t}")));
        }
    }
    for pair in tiers.windows(2) {
        let (upper, lower) = (pair[0], pair[1]);
        if lower.max.is_none_or(|m| m >= upper.min) {
            return Err(MinerError::TierConfig(format!(
                "tiers {upper} and {lower} overlap or are out of order"
            )));
        }
    }
    Ok(())
}

pub fn tier_of(tiers: &[StarTier], stars: u64) -> Option<&StarTier> {
    tiers.iter().find(|t| t.contains(stars))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoRecord {
    /// `owner/name`
    pub identifier: String,
    pub stars: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clone_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notebooks: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub manifests: Vec<RequirementSource>,
}

impl RepoRecord {
    pub fn stub(identifier: impl Into<String>, stars: u64) -> Self {
        RepoRecord {
            identifier: identifier.into(),
            stars,
            clone_path: None,
            content_hash: None,
            notebooks: Vec::new(),
            manifests: Vec::new(),
        }
    }

    /// Directory name under the corpus root: `owner__name`.
    pub fn local_dir_name(&self) -> String {
        self.identifier.replace('/', "__")
    }
}

fn sort_records(records: &mut [RepoRecord]) {
    records.sort_by(|a, b| b.stars.cmp(&a.stars).then_with(|| a.identifier.cmp(&b.identifier)));
}

/// Up to `cap` repositories per tier, ordered by stars then identifier.
pub fn search_repos(
    backend: &dyn SearchBackend,
    tiers: &[StarTier],
    filters: &QueryFilters,
) -> Result<Vec<RepoRecord>, MinerError> {
    validate_tiers(tiers)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for tier in tiers {
        let mut found: Vec<RepoRecord> = Vec::new();
        let mut page = 1;
        while found.len() < tier.cap {
            let result = backend.search(tier, filters, page)?;
            let exhausted = result.items.is_empty() || !result.has_more;
            found.extend(
                result
                    .items
                    .into_iter()
                    .filter(|e| tier.contains(e.stars))
                    .map(|e| RepoRecord::stub(e.identifier, e.stars)),
            );
            if exhausted {
                break;
            }
            page += 1;
        }
        sort_records(&mut found);
        found.dedup_by(|a, b| a.identifier == b.identifier);
        found.retain(|r| !seen.contains(&r.identifier));
        found.truncate(tier.cap);
        seen.extend(found.iter().map(|r| r.identifier.clone()));
        out.extend(found);
    }
    Ok(out)
}

/// All `.ipynb` files below `root`, skipping checkpoint and VCS directories.
pub fn find_notebooks(root: &Path) -> Vec<PathBuf> {
    let mut found: Vec<PathBuf> = WalkDir::new(root)
        .into_iter()
        .filter_entry(|e| {
            let name = e.file_name().to_string_lossy();
            !(e.file_type().is_dir() && (name == ".ipynb_checkpoints" || name == ".git"))
        })
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "ipynb"))
        .map(|e| e.into_path())
        .collect();
    found.sort();
    found
}

/// Uniform sample without replacement of `fraction` of `items`, in input order.
pub fn sample_fraction<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Vec<T> {
    let fraction = fraction.clamp(0.0, 1.0);
    let amount = (items.len() as f64 * fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, items.len(), amount).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| items[i].clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub repo: String,
    pub stars: u64,
    pub tier: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hash: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notebooks: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub seed: u64,
    pub notebook_fraction: f64,
    pub tiers: Vec<StarTier>,
    pub repos: Vec<ManifestEntry>,
}

impl SampleManifest {
    pub fn build(records: &[RepoRecord], tiers: &[StarTier], seed: u64, notebook_fraction: f64) -> Self {
        let repos = records
            .iter()
            .map(|r| ManifestEntry {
                repo: r.identifier.clone(),
                stars: r.stars,
                tier: tier_of(tiers, r.stars).map(ToString::to_string).unwrap_or_default(),
                hash: r.content_hash.clone(),
                notebooks: r.notebooks.clone(),
            })
            .collect();
        SampleManifest {
            seed,
            notebook_fraction,
            tiers: tiers.to_vec(),
            repos,
        }
    }
}
