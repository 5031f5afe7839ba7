use std::path::Path;
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use reqwest::blocking::Client;
use reqwest::header::{HeaderMap, ACCEPT, AUTHORIZATION, USER_AGENT};
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use super::{MinerError, StarTier};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryFilters {
    pub language: String,
    /// Extra search qualifiers appended verbatim, e.g. `archived:false`.
    pub qualifiers: Vec<String>,
    pub per_page: usize,
}

impl Default for QueryFilters {
    fn default() -> Self {
        QueryFilters {
            language: "Jupyter Notebook".into(),
            qualifiers: Vec::new(),
            per_page: 100,
        }
    }
}

impl QueryFilters {
    pub fn query(&self, tier: &StarTier) -> String {
        let mut q = format!("language:\"{}\" stars:{}", self.language, tier.query_range());
        for extra in &self.qualifiers {
            q.push(' ');
            q.push_str(extra);
        }
        q
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub identifier: String,
    pub stars: u64,
    #[serde(default)]
    pub language: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct SearchPage {
    pub items: Vec<IndexEntry>,
    pub has_more: bool,
}

pub trait SearchBackend: Send + Sync {
    /// One 1-based page of repositories in `tier`, best first.
    fn search(&self, tier: &StarTier, filters: &QueryFilters, page: usize) -> Result<SearchPage, MinerError>;
}

/// Offline snapshot of repository metadata, searched in memory.
#[derive(Debug, Clone, Default)]
pub struct FixtureIndex {
    entries: Vec<IndexEntry>,
}

impl FixtureIndex {
    pub fn new(entries: Vec<IndexEntry>) -> Self {
        FixtureIndex { entries }
    }

    pub fn load(path: &Path) -> Result<Self, MinerError> {
        let text = std::fs::read_to_string(path)?;
        let entries = serde_json::from_str(&text)
            .map_err(|e| MinerError::Search(format!("{}: {e}", path.display())))?;
        Ok(FixtureIndex { entries })
    }
}

impl SearchBackend for FixtureIndex {
    fn search(&self, tier: &StarTier, filters: &QueryFilters, page: usize) -> Result<SearchPage, MinerError> {
        let mut matches: Vec<&IndexEntry> = self
            .entries
            .iter()
            .filter(|e| tier.contains(e.stars))
            .filter(|e| e.language.as_deref().is_none_or(|l| l.eq_ignore_ascii_case(&filters.language)))
            .collect();
        matches.sort_by(|a, b| b.stars.cmp(&a.stars).then_with(|| a.identifier.cmp(&b.identifier)));
        let per_page = filters.per_page.max(1);
        let start = page.saturating_sub(1) * per_page;
        let items: Vec<IndexEntry> = matches.iter().skip(start).take(per_page).map(|e| (*e).clone()).collect();
        Ok(SearchPage {
            has_more: start + items.len() < matches.len(),
            items,
        })
    }
}

#[derive(Deserialize)]
struct ApiRepo {
    full_name: String,
    stargazers_count: u64,
    #[serde(default)]
    language: Option<String>,
}

#[derive(Deserialize)]
struct ApiResponse {
    total_count: usize,
    items: Vec<ApiRepo>,
}

/// Client for the hosting service's repository search API.
pub struct GitHubSearch {
    client: Client,
    base_url: String,
    token: Option<String>,
    min_interval: Duration,
    max_rate_waits: usize,
    last_call: Mutex<Option<Instant>>,
}

pub const TOKEN_ENV: &str = "GITHUB_TOKEN";

/// The search endpoint never returns results past this offset.
const SEARCH_RESULT_LIMIT: usize = 1000;

impl GitHubSearch {
    pub fn from_env(base_url: Option<&str>) -> Result<Self, MinerError> {
        let token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
        let client = Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| MinerError::Search(e.to_string()))?;
        // 30 authenticated or 10 anonymous search requests per minute.
        let min_interval = if token.is_some() { Duration::from_secs(2) } else { Duration::from_secs(6) };
        Ok(GitHubSearch {
            client,
            base_url: base_url.unwrap_or("https://api.github.com").trim_end_matches('/').to_string(),
            token,
            min_interval,
            max_rate_waits: 3,
            last_call: Mutex::new(None),
        })
    }

    fn request(&self, query: &str, page: usize, per_page: usize) -> Result<ApiResponse, MinerError> {
        let mut last = self.last_call.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(prev) = *last {
            let since = prev.elapsed();
            if since < self.min_interval {
                thread::sleep(self.min_interval - since);
            }
        }
        let mut req = self
            .client
            .get(format!("{}/search/repositories", self.base_url))
            .query(&[
                ("q", query),
                ("sort", "stars"),
                ("order", "desc"),
                ("per_page", &per_page.to_string()),
                ("page", &page.to_string()),
            ])
            .header(USER_AGENT, "nbrestore")
            .header(ACCEPT, "application/vnd.github+json");
        if let Some(token) = &self.token {
            req = req.header(AUTHORIZATION, format!("Bearer {token}"));
        }
        let resp = req.send().map_err(|e| MinerError::Search(e.to_string()));
        *last = Some(Instant::now());
        let resp = resp?;
        let status = resp.status();
        match status {
            StatusCode::UNAUTHORIZED => Err(MinerError::AuthFailure(resp.text().unwrap_or_default())),
            StatusCode::FORBIDDEN | StatusCode::TOO_MANY_REQUESTS => {
                let headers = resp.headers().clone();
                let body = resp.text().unwrap_or_default();
                match retry_after(&headers, SystemTime::now()) {
                    Some(secs) => Err(MinerError::RateLimited { retry_after_secs: secs }),
                    None if status == StatusCode::TOO_MANY_REQUESTS || body.contains("rate limit") => {
                        Err(MinerError::RateLimited { retry_after_secs: 60 })
                    }
                    None => Err(MinerError::AuthFailure(body)),
                }
            }
            s if s.is_success() => resp.json().map_err(|e| MinerError::Search(e.to_string())),
            s => Err(MinerError::Search(format!("{s}: {}", resp.text().unwrap_or_default()))),
        }
    }
}

/// Seconds to wait according to `retry-after` or the rate-limit reset header.
fn retry_after(headers: &HeaderMap, now: SystemTime) -> Option<u64> {
    let get = |name: &str| headers.get(name).and_then(|v| v.to_str().ok()).and_then(|v| v.trim().parse::<u64>().ok());
    if let Some(secs) = get("retry-after") {
        return Some(secs);
    }
    if get("x-ratelimit-remaining") == Some(0) {
        let reset = get("x-ratelimit-reset")?;
        let now = now.duration_since(UNIX_EPOCH).ok()?.as_secs();
        return Some(reset.saturating_sub(now).max(1));
    }
    None
}

impl SearchBackend for GitHubSearch {
    fn search(&self, tier: &StarTier, filters: &QueryFilters, page: usize) -> Result<SearchPage, MinerError> {
        let per_page = filters.per_page.clamp(1, 100);
        let query = filters.query(tier);
        let mut waits = 0;
        let resp = loop {
            match self.request(&query, page, per_page) {
                Err(MinerError::RateLimited { retry_after_secs }) if waits < self.max_rate_waits => {
                    waits += 1;
                    tracing::warn!(retry_after_secs, "search rate limited, waiting");
                    thread::sleep(Duration::from_secs(retry_after_secs));
                }
                other => break other?,
            }
        };
        let seen = page * per_page;
        let has_more = seen < resp.total_count.min(SEARCH_RESULT_LIMIT) && !resp.items.is_empty();
        Ok(SearchPage {
            items: resp
                .items
                .into_iter()
                .map(|r| IndexEntry {
                    identifier: r.full_name,
                    stars: r.stargazers_count,
                    language: r.language,
                })
                .collect(),
            has_more,
        })
    }
}
