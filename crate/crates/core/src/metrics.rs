use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WorkerMode {
    Normal,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    /// Censored: the run hit the timeout; `makespan` holds the timeout.
    Timeout,
    Failed,
}

/// One benchmark execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub graph_name: String,
    pub scheduler: String,
    pub workers: usize,
    pub nodes: usize,
    pub mode: WorkerMode,
    pub duration_scale: f64,
    pub repetition: usize,
    pub tasks: usize,
    pub status: RunStatus,
    /// Seconds.
    pub makespan: f64,
    /// Average overhead per task, milliseconds.
    pub aot: f64,
}

impl BenchRecord {
    /// Average overhead per task in milliseconds for a makespan in seconds.
    pub fn aot_ms(makespan_secs: f64, tasks: usize) -> f64 {
        makespan_secs * 1000.0 / tasks as f64
    }

    /// Configuration label used when comparing runs: the scheduler name, with
    /// `-zero` appended for zero-worker runs.
    pub fn label(&self) -> String {
        match self.mode {
            WorkerMode::Normal => self.scheduler.clone(),
            WorkerMode::Zero => format!("{}-zero", self.scheduler),
        }
    }

    /// Benchmark identity across configurations: graph and cluster size.
    pub fn graph_key(&self) -> String {
        format!("{}@{}w", self.graph_name, self.workers)
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no baseline `{baseline}` runs for {graph}")]
    MissingBaseline { baseline: String, graph: String },
    #[error("no successful runs for label `{0}`")]
    NoRuns(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub fn write_records(records: &[BenchRecord], out: impl Write, header: bool) -> Result<(), MetricsError> {
    let mut writer = csv::WriterBuilder::new().has_headers(header).from_writer(out);
    for r in records {
        writer.serialize(r)?;
    }
    writer.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_records(input: impl Read) -> Result<Vec<BenchRecord>, MetricsError> {
    let mut reader = csv::Reader::from_reader(input);
    Ok(reader.deserialize().collect::<Result<Vec<BenchRecord>, _>>()?)
}

/// Per-graph makespan ratios of one configuration against a baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonSummary {
    pub baseline: String,
    pub candidate: String,
    /// graph key -> mean baseline makespan / mean candidate makespan
    pub speedups: BTreeMap<String, f64>,
    pub geomean: f64,
}

pub fn geometric_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v.ln(), n + 1));
    if n == 0 {
        f64::NAN
    } else {
        (sum / n as f64).exp()
    }
}

fn mean_makespans(records: &[BenchRecord], label: &str) -> BTreeMap<String, f64> {
    let mut groups: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.status == RunStatus::Ok && r.label() == label) {
        let entry = groups.entry(r.graph_key()).or_insert((0.0, 0));
        entry.0 += r.makespan;
        entry.1 += 1;
    }
    groups.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect()
}

/// Compares `candidate` against `baseline` on every graph the candidate ran.
pub fn summarize(
    records: &[BenchRecord],
    baseline: &str,
    candidate: &str,
) -> Result<ComparisonSummary, MetricsError> {
    let base = mean_makespans(records, baseline);
    let cand = mean_makespans(records, candidate);
    if cand.is_empty() {
        return Err(MetricsError::NoRuns(candidate.to_owned()));
    }
    let mut speedups = BTreeMap::new();
    for (graph, cand_mean) in cand {
        let base_mean = base.get(&graph).ok_or_else(|| MetricsError::MissingBaseline {
            baseline: baseline.to_owned(),
            graph: graph.clone(),
        })?;
        speedups.insert(graph, base_mean / cand_mean);
    }
    let geomean = geometric_mean(speedups.values().copied());
    Ok(ComparisonSummary { baseline: baseline.to_owned(), candidate: candidate.to_owned(), speedups, geomean })
}

/// Summaries of every label found in `records` (the baseline included)
/// against `baseline`.
pub fn summarize_all(records: &[BenchRecord], baseline: &str) -> Result<Vec<ComparisonSummary>, MetricsError> {
    let mut labels: Vec<String> = records.iter().map(BenchRecord::label).collect();
    labels.sort();
    labels.dedup();
    labels.into_iter().map(|label| summarize(records, baseline, &label)).collect()
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `NaN` when either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
