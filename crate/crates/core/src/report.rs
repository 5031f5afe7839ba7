//! Corpus-level aggregation of execution and restoration results.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{ErrorCategory, Restorability, TriageTable};
use crate::miner::StarTier;
use crate::restore::{ActionKind, FinalStatus, ReportDigest, RestorationTrace, StepVerdict};

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

pub const TABLE_HEADER: [&str; 4] = ["Error Type", "#", "% w.r.t non-executable", "% w.r.t dataset"];

pub const BUCKET_LABELS: [&str; 12] = [
    "0%", "(0-10%]", "(10-20%]", "(20-30%]", "(30-40%]", "(40-50%]", "(50-60%]", "(60-70%]", "(70-80%]",
    "(80-90%]", "(90-100%)", "100%",
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Everything known about one analyzed notebook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NotebookResult {
    pub notebook: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repo: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stars: Option<u64>,
    pub initial: ReportDigest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restoration: Option<RestorationTrace>,
}

impl NotebookResult {
    pub fn from_trace(trace: RestorationTrace) -> Self {
        NotebookResult {
            notebook: trace.notebook.clone(),
            repo: None,
            stars: None,
            initial: trace.initial.clone(),
            restoration: Some(trace),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub executable: usize,
    pub restorable: usize,
    pub pathological: usize,
    pub needs_interaction: usize,
    pub non_analyzable: usize,
}

impl Totals {
    pub fn sum(&self) -> usize {
        self.executable + self.restorable + self.pathological + self.needs_interaction + self.non_analyzable
    }

    pub fn non_executable(&self) -> usize {
        self.sum() - self.executable
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: ErrorCategory,
    pub count: usize,
}

/// Counts over the twelve partial-executability buckets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: [usize; 12],
}

impl Histogram {
    pub fn bucket(cells_ok: usize, total: usize, fully: bool) -> usize {
        if fully || (total > 0 && cells_ok >= total) {
            11
        } else if cells_ok == 0 || total == 0 {
            0
        } else {
            (10 * cells_ok).div_ceil(total).min(10)
        }
    }

    pub fn add(&mut self, cells_ok: usize, total: usize, fully: bool) {
        self.counts[Self::bucket(cells_ok, total, fully)] += 1;
    }

    pub fn population(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaStats {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub max: f64,
}

impl DeltaStats {
    fn of(mut values: Vec<f64>) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        values.sort_by(f64::total_cmp);
        let rank = |p: f64| values[((p * values.len() as f64).ceil() as usize).clamp(1, values.len()) - 1];
        Some(DeltaStats {
            count: values.len(),
            mean: values.iter().sum::<f64>() / values.len() as f64,
            p50: rank(0.5),
            p90: rank(0.9),
            max: values[values.len() - 1],
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RestorationSummary {
    pub attempted: usize,
    pub status_counts: BTreeMap<FinalStatus, usize>,
    pub overall: Option<DeltaStats>,
    pub per_strategy: BTreeMap<ActionKind, DeltaStats>,
    /// Post-restoration partial executability of attempted notebooks.
    pub final_hist: Histogram,
    /// Cells gained relative to each notebook's size.
    pub improvement_hist: Histogram,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierRow {
    pub tier: String,
    pub notebooks: usize,
    pub executable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub schema_version: u32,
    pub analyzed: usize,
    pub totals: Totals,
    pub category_table: Vec<CategoryRow>,
    pub partial_exec_hist: Histogram,
    pub pathological_hist: Histogram,
    pub pathological_mean: Option<f64>,
    pub restoration: RestorationSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub star_breakdown: Option<Vec<TierRow>>,
}

fn mean(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

pub fn aggregate(results: &[NotebookResult], triage: &TriageTable, tiers: Option<&[StarTier]>) -> CorpusSummary {
    let mut totals = Totals::default();
    let mut categories: BTreeMap<ErrorCategory, usize> = BTreeMap::new();
    let mut hist = Histogram::default();
    let mut patho_hist = Histogram::default();
    let mut patho_ratios = Vec::new();

    for r in results {
        let d = &r.initial;
        hist.add(d.cells_ok, d.total_code_cells, d.is_fully_executable());
        let Some(verdict) = (!d.is_fully_executable()).then(|| triage.triage(&d.category)).flatten() else {
            totals.executable += 1;
            continue;
        };
        *categories.entry(d.category.clone()).or_default() += 1;
        match verdict {
            Restorability::Restorable => totals.restorable += 1,
            Restorability::NeedsInteraction => totals.needs_interaction += 1,
            Restorability::NonAnalyzable => totals.non_analyzable += 1,
            Restorability::Pathological => {
                totals.pathological += 1;
                patho_hist.add(d.cells_ok, d.total_code_cells, false);
                patho_ratios.push(d.ratio);
            }
        }
    }

    let mut category_table: Vec<CategoryRow> =
        categories.into_iter().map(|(category, count)| CategoryRow { category, count }).collect();
    category_table.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.category.label().cmp(&b.category.label())));

    let star_breakdown = tiers.map(|tiers| {
        tiers
            .iter()
            .map(|t| {
                let members: Vec<&NotebookResult> =
                    results.iter().filter(|r| r.stars.is_some_and(|s| t.contains(s))).collect();
                TierRow {
                    tier: t.to_string(),
                    notebooks: members.len(),
                    executable: members.iter().filter(|r| r.initial.is_fully_executable()).count(),
                }
            })
            .collect()
    });

    CorpusSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        analyzed: results.len(),
        totals,
        category_table,
        partial_exec_hist: hist,
        pathological_hist: patho_hist,
        pathological_mean: mean(patho_ratios),
        restoration: summarize_restoration(results),
        star_breakdown,
    }
}

fn summarize_restoration(results: &[NotebookResult]) -> RestorationSummary {
    let mut out = RestorationSummary::default();
    let mut overall = Vec::new();
    let mut per_strategy: BTreeMap<ActionKind, Vec<f64>> = BTreeMap::new();
    let attempted = results
        .iter()
        .filter_map(|r| r.restoration.as_ref())
        .filter(|t| !t.initial.is_fully_executable());
    for t in attempted {
        out.attempted += 1;
        *out.status_counts.entry(t.final_status).or_default() += 1;
        overall.push(t.delta_ratio);
        let f = &t.final_report;
        out.final_hist.add(f.cells_ok, f.total_code_cells, f.is_fully_executable());
        let gained = usize::try_from(t.cells_gained).unwrap_or(0);
        let total = f.total_code_cells.max(t.initial.total_code_cells);
        out.improvement_hist.add(gained, total, false);
        for step in &t.steps {
            if let (StepVerdict::Progress | StepVerdict::Shifted, Some(post)) = (step.verdict, &step.post) {
                per_strategy.entry(step.action.kind).or_default().push(post.ratio - step.pre.ratio);
            }
        }
    }
    out.overall = DeltaStats::of(overall);
    out.per_strategy = per_strategy.into_iter().filter_map(|(k, v)| Some((k, DeltaStats::of(v)?))).collect();
    out
}

/// `count / denom` as a percentage with one decimal, rounding half to even on the exact ratio.
pub fn percent(count: usize, denom: usize) -> String {
    if denom == 0 {
        return "0.0".into();
    }
    let num = count as u128 * 1000;
    let denom = denom as u128;
    let (mut q, r) = (num / denom, num % denom);
    if 2 * r > denom || (2 * r == denom && q % 2 == 1) {
        q += 1;
    }
    format!("{}.{}", q / 10, q % 10)
}

impl CorpusSummary {
    pub fn to_json(&self) -> Result<String, ReportError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn table_csv(&self) -> Result<String, ReportError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(TABLE_HEADER)?;
        let non_exec = self.totals.non_executable();
        for row in &self.category_table {
            w.write_record([
                row.category.label(),
                row.count.to_string(),
                percent(row.count, non_exec),
                percent(row.count, self.analyzed),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8"))
    }

    /// Totals with their share of the analyzed population.
    pub fn totals_csv(&self) -> Result<String, ReportError> {
        let t = &self.totals;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["Status", "#", "% w.r.t dataset"])?;
        for (name, n) in [
            ("executable", t.executable),
            ("restorable", t.restorable),
            ("pathological", t.pathological),
            ("needs_interaction", t.needs_interaction),
            ("non_analyzable", t.non_analyzable),
        ] {
            w.write_record([name.to_string(), n.to_string(), percent(n, self.analyzed)])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8"))
    }

    /// Bucket counts for the executability, post-restoration and improvement histograms.
    pub fn histogram_csv(&self) -> Result<String, ReportError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["bucket", "initial", "pathological", "restored", "improvement"])?;
        for (i, label) in BUCKET_LABELS.iter().enumerate() {
            w.write_record([
                label.to_string(),
                self.partial_exec_hist.counts[i].to_string(),
                self.pathological_hist.counts[i].to_string(),
                self.restoration.final_hist.counts[i].to_string(),
                self.restoration.improvement_hist.counts[i].to_string(),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitFormat {
    Json,
    Csv,
}

pub fn emit(summary: &CorpusSummary, formats: &[EmitFormat], dest: &Path) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(dest)?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<(), ReportError> {
        let path = dest.join(name);
        fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };
    for f in formats {
        match f {
            EmitFormat::Json => put("summary.json", summary.to_json()?)?,
            EmitFormat::Csv => {
                put("error_table.csv", summary.table_csv()?)?;
                put("totals.csv", summary.totals_csv()?)?;
                put("histograms.csv", summary.histogram_csv()?)?;
            }
        }
    }
    Ok(written)
}
