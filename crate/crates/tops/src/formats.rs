//! CSV and JSON artifacts written by the CLI and the experiment runner.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tops_core::ldp::DensityEstimate;
use tops_core::perturber::{HierarchyPlan, HierarchyRelease, PublishedAggregate};
use tops_core::pipeline::{BudgetLedger, ClientReport, Mode, RunSummary};
use tops_core::threshold::{ThresholdDecision, ThresholdTrace};

use crate::error::{Result, ToolError};

fn csv_error(path: &Path, e: csv::Error) -> ToolError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => ToolError::Unwritable {
            path: path.to_path_buf(),
            source,
        },
        kind => ToolError::config(format!("{}: {kind:?}", path.display())),
    }
}

/// Open `path` for writing, or standard output for `None`.
pub fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    match path {
        Some(p) => {
            let file = fs::File::create(p).map_err(|source| ToolError::Unwritable {
                path: p.to_path_buf(),
                source,
            })?;
            Ok(Box::new(std::io::BufWriter::new(file)))
        }
        None => Ok(Box::new(std::io::stdout().lock())),
    }
}

fn label(path: Option<&Path>) -> PathBuf {
    path.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("<stdout>"))
}

#[derive(Serialize, Deserialize)]
struct PublishedRow {
    index: u64,
    value: Option<f64>,
}

/// `index,value` rows, 1-based, with an empty value for held-out readings.
pub fn write_published(path: Option<&Path>, published: &[Option<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink(path)?);
    for (i, value) in published.iter().enumerate() {
        w.serialize(PublishedRow {
            index: i as u64 + 1,
            value: *value,
        })
        .map_err(|e| csv_error(&label(path), e))?;
    }
    w.flush().map_err(|source| ToolError::Unwritable {
        path: label(path),
        source,
    })
}

pub fn read_published(path: &Path) -> Result<Vec<Option<f64>>> {
    let file = fs::File::open(path).map_err(|source| ToolError::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for row in reader.deserialize::<PublishedRow>() {
        let row = row.map_err(|e| ToolError::BadRow {
            path: path.to_path_buf(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            reason: format!("{:?}", e.kind()),
        })?;
        if row.index != out.len() as u64 + 1 {
            return Err(ToolError::BadRow {
                path: path.to_path_buf(),
                line: out.len() as u64 + 2,
                reason: format!("expected index {}, found {}", out.len() + 1, row.index),
            });
        }
        out.push(row.value);
    }
    Ok(out)
}

#[derive(Serialize)]
struct AggregateRow {
    chunk_index: u64,
    group_index: u64,
    value: f64,
}

pub fn write_aggregates(path: &Path, aggregates: &[PublishedAggregate]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink(Some(path))?);
    for a in aggregates {
        w.serialize(AggregateRow {
            chunk_index: a.chunk,
            group_index: a.group,
            value: a.value,
        })
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|source| ToolError::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Serialize)]
struct DensityRow {
    bin_value: f64,
    frequency: f64,
}

pub fn write_density(path: &Path, est: &DensityEstimate) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink(Some(path))?);
    for (i, &frequency) in est.frequencies.iter().enumerate() {
        w.serialize(DensityRow {
            bin_value: est.value(i),
            frequency,
        })
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|source| ToolError::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Serialize)]
struct ReportRow {
    user_id: u64,
    phase: &'static str,
    report: f64,
}

pub fn write_reports(path: &Path, reports: &[ClientReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink(Some(path))?);
    for r in reports {
        w.serialize(ReportRow {
            user_id: r.user,
            phase: r.phase.label(),
            report: r.report,
        })
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|source| ToolError::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Serialize)]
struct TraceRow {
    candidate: f64,
    score: f64,
}

/// `candidate,score` rows. Decisions without a score trace write only the header.
pub fn write_trace(path: &Path, decision: &ThresholdDecision) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(sink(Some(path))?);
    w.write_record(["candidate", "score"]).map_err(|e| csv_error(path, e))?;
    if let ThresholdTrace::Scores { candidates, scores } = &decision.trace {
        for (&candidate, &score) in candidates.iter().zip(scores) {
            w.serialize(TraceRow { candidate, score }).map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|source| ToolError::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

/// Compact JSON form of a threshold decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRecord {
    pub theta: f64,
    pub method: String,
    pub epsilon: f64,
    pub m: usize,
    pub trace_path: Option<String>,
}

impl ThresholdRecord {
    pub fn new(decision: &ThresholdDecision, trace_path: Option<&Path>) -> Self {
        Self {
            theta: decision.theta,
            method: decision.method.label().to_string(),
            epsilon: decision.epsilon,
            m: decision.m,
            trace_path: trace_path.map(|p| p.display().to_string()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Timings {
    pub elapsed_ms: f64,
}

/// Everything about a `run` except the published values.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub mode: Mode,
    pub seed: u64,
    pub theta: f64,
    pub threshold: ThresholdRecord,
    pub smoothed_levels: Option<u32>,
    pub plan: Option<HierarchyPlan>,
    pub ledger: BudgetLedger,
    pub warnings: Vec<String>,
    pub readings: u64,
    pub published: u64,
    pub timings: Timings,
}

impl RunManifest {
    pub fn new(summary: &RunSummary, seed: u64, published: u64, trace_path: Option<&Path>, elapsed_ms: f64) -> Self {
        Self {
            mode: summary.mode,
            seed,
            theta: summary.decision.theta,
            threshold: ThresholdRecord::new(&summary.decision, trace_path),
            smoothed_levels: summary.smoothed,
            plan: summary.plan,
            ledger: summary.ledger.clone(),
            warnings: summary.warnings.clone(),
            readings: summary.readings,
            published,
            timings: Timings { elapsed_ms },
        }
    }
}

/// Diagnostic dump of every noisy node, `chunks[c][t][ℓ]` with leaves at `ℓ = 0`.
#[derive(Debug, Clone, Serialize)]
pub struct TreeDump<'a> {
    pub theta: f64,
    pub plan: HierarchyPlan,
    pub chunks: &'a [Vec<Vec<Vec<f64>>>],
}

impl<'a> TreeDump<'a> {
    pub fn new(theta: f64, release: &'a HierarchyRelease) -> Self {
        Self {
            theta,
            plan: *release.plan(),
            chunks: release.chunks(),
        }
    }
}

pub fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut w = sink(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| ToolError::config(format!("{}: {e}", label(path).display())))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|source| ToolError::Unwritable {
        path: label(path),
        source,
    })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| ToolError::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| ToolError::config(format!("{}: {e}", path.display())))
}
