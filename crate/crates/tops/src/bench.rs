//! Seeded experiment matrix: methods × ε × repetitions, scored by range-query MSE.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tops_core::perturber::{HierarchyPlan, HierarchyRelease};
use tops_core::pipeline::{self, Mode, PipelineConfig};
use tops_core::rng::streams;
use tops_core::smoother::SmootherKind;
use tops_core::threshold::{
    self, em_threshold, oracle_threshold, pak_threshold, sp_threshold, PakParams, StreamConfig, DEFAULT_BIAS_SCALE,
    DEFAULT_FANOUT, DEFAULT_RANGE,
};
use tops_core::workload::{
    evaluate_with, gen_queries_from, gen_synthetic, median, percentile, summarize, QueryMode, QueryWorkload,
    SyntheticSpec, DEFAULT_QUERY_COUNT,
};
use tops_core::RandomSource;

use crate::config::SmootherSpec;
use crate::error::{Result, ToolError};
use crate::formats::{read_json, sink};
use crate::io::{load_stream, ColumnSelector, StreamFormat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Binary hierarchy, no consistency, canonical decomposition.
    #[serde(rename = "H2")]
    H2,
    /// Fan-out 16, no consistency, canonical decomposition.
    #[serde(rename = "H16")]
    H16,
    /// Fan-out 16 with consistency.
    #[serde(rename = "H16c")]
    H16c,
    /// Consistent fan-out 16 with the optimised smoother level.
    #[serde(rename = "Ĥ16c", alias = "hat-H16c", alias = "HatH16c")]
    SmoothedH16c,
    /// Always answers 0.
    #[serde(rename = "Base")]
    Base,
    #[serde(rename = "EM-E")]
    EmE,
    #[serde(rename = "S-PAK")]
    SPak,
    #[serde(rename = "S-P")]
    SP,
    /// Non-private best θ for the range-error model.
    #[serde(rename = "oracle")]
    Oracle,
    #[serde(rename = "ToPS")]
    Tops,
    #[serde(rename = "ToPL")]
    Topl,
    /// S-PAK threshold followed by the binary hierarchy.
    #[serde(rename = "PAK")]
    Pak,
}

impl Method {
    pub const ALL: [Method; 12] = [
        Method::H2,
        Method::H16,
        Method::H16c,
        Method::SmoothedH16c,
        Method::Base,
        Method::EmE,
        Method::SPak,
        Method::SP,
        Method::Oracle,
        Method::Tops,
        Method::Topl,
        Method::Pak,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Method::H2 => "H2",
            Method::H16 => "H16",
            Method::H16c => "H16c",
            Method::SmoothedH16c => "Ĥ16c",
            Method::Base => "Base",
            Method::EmE => "EM-E",
            Method::SPak => "S-PAK",
            Method::SP => "S-P",
            Method::Oracle => "oracle",
            Method::Tops => "ToPS",
            Method::Topl => "ToPL",
            Method::Pak => "PAK",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(text.to_string()))
            .map_err(|_| ToolError::config(format!("unknown method {text:?}")))
    }

    // Stable per-method stream tag, independent of the order methods are listed in.
    fn tag(&self) -> u64 {
        Method::ALL.iter().position(|m| m == self).unwrap_or(0) as u64 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic { spec: SyntheticSpec, n: usize },
    File { path: PathBuf, column: Option<String> },
}

fn default_range() -> u64 {
    DEFAULT_RANGE
}
fn default_fanout() -> u32 {
    DEFAULT_FANOUT
}
fn default_bias_scale() -> f64 {
    DEFAULT_BIAS_SCALE
}
fn default_repetitions() -> usize {
    100
}
fn default_queries() -> usize {
    DEFAULT_QUERY_COUNT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub data: DataSource,
    /// Upper bound B; defaults to the generator bound or the file maximum.
    #[serde(rename = "B", default)]
    pub bound: Option<f64>,
    #[serde(default = "default_range")]
    pub r: u64,
    #[serde(default = "default_fanout")]
    pub b: u32,
    /// Holdout size; queries cover readings `m+1..=n` for every method.
    #[serde(default)]
    pub m: usize,
    #[serde(default = "default_bias_scale")]
    pub c: f64,
    pub epsilons: Vec<f64>,
    pub methods: Vec<Method>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_queries")]
    pub queries: usize,
    #[serde(default)]
    pub query_mode: QueryMode,
    /// Clip the data at this percentile and use the clipped value as B.
    #[serde(default)]
    pub truncate_percentile: Option<f64>,
    /// Fixed budget for the threshold stage instead of the cell's ε.
    #[serde(default)]
    pub threshold_epsilon: Option<f64>,
    /// Fixed budget for the release stage instead of the cell's ε.
    #[serde(default)]
    pub release_epsilon: Option<f64>,
    #[serde(default)]
    pub pak: PakParams,
    #[serde(default)]
    pub smoother: SmootherSpec,
    /// Seed for the mechanisms; data and queries use the run seed only.
    #[serde(default)]
    pub mechanism_seed: Option<u64>,
}

impl BenchConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilons.is_empty() || self.epsilons.iter().any(|e| !(*e > 0.0)) {
            return Err(ToolError::config("epsilons must be a non-empty list of positive values"));
        }
        if self.methods.is_empty() {
            return Err(ToolError::config("no methods listed"));
        }
        if self.repetitions == 0 || self.queries == 0 {
            return Err(ToolError::config("repetitions and queries must be positive"));
        }
        if let Some(p) = self.truncate_percentile {
            if !(p > 0.0 && p <= 100.0) {
                return Err(ToolError::config("truncate_percentile must lie in (0, 100]"));
            }
        }
        if let DataSource::Synthetic { spec, n } = &self.data {
            spec.validate()?;
            if *n <= self.m {
                return Err(ToolError::config("stream length must exceed the holdout"));
            }
        }
        self.smoother.to_kind()?;
        Ok(())
    }
}

/// One repetition's data.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub values: Arc<Vec<f64>>,
    pub bound: f64,
}

fn clip(values: &[f64], config: &BenchConfig, bound: f64) -> Dataset {
    match config.truncate_percentile {
        Some(p) => {
            let cap = percentile(values, p).max(f64::MIN_POSITIVE);
            Dataset {
                values: Arc::new(values.iter().map(|v| v.min(cap)).collect()),
                bound: cap,
            }
        }
        None => Dataset {
            values: Arc::new(values.to_vec()),
            bound,
        },
    }
}

/// Data for repetition `rep`. Synthetic data is regenerated per repetition.
pub fn dataset_for(config: &BenchConfig, seed: u64, rep: usize, file: Option<&Dataset>) -> Result<Dataset> {
    match (&config.data, file) {
        (_, Some(loaded)) => Ok(loaded.clone()),
        (DataSource::Synthetic { spec, n }, None) => {
            let data_seed = RandomSource::new(seed, streams::SYNTHETIC).derive(rep as u64).next_u64();
            let values = gen_synthetic(spec, *n, data_seed)?;
            let bound = config.bound.unwrap_or(spec.upper_bound());
            Ok(clip(&values, config, bound))
        }
        (DataSource::File { .. }, None) => Err(ToolError::config("file data was not loaded")),
    }
}

fn load_file(config: &BenchConfig) -> Result<Option<Dataset>> {
    let DataSource::File { path, column } = &config.data else {
        return Ok(None);
    };
    let format = column.as_deref().map(|c| StreamFormat::Csv(ColumnSelector::parse(c))).unwrap_or_default();
    let loaded = load_stream(path, &format)?;
    if loaded.values.len() <= config.m {
        return Err(ToolError::config("stream length must exceed the holdout"));
    }
    let bound = config.bound.unwrap_or(loaded.profile.max);
    if let Some(i) = loaded.values.iter().position(|&v| v > bound) {
        return Err(tops_core::Error::DataContract {
            index: i + 1,
            reason: format!("reading {} above B = {bound}", loaded.values[i]),
        }
        .into());
    }
    Ok(Some(clip(&loaded.values, config, bound)))
}

/// Queries for repetition `rep` over the `len` post-holdout readings.
pub fn workload_for(config: &BenchConfig, seed: u64, rep: usize, len: usize) -> Result<QueryWorkload> {
    let mut rng = RandomSource::new(seed, streams::WORKLOAD).derive(rep as u64);
    Ok(gen_queries_from(len, config.r, config.queries, config.query_mode, &mut rng)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub method: Method,
    pub epsilon: f64,
    pub repetition: usize,
    pub theta: Option<f64>,
    pub mse: std::result::Result<f64, String>,
}

struct Answers {
    theta: Option<f64>,
    mse: f64,
}

fn prefix_sums(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out = vec![0.0];
    let mut acc = 0.0;
    for v in values {
        acc += v;
        out.push(acc);
    }
    out
}

fn score_published(truth: &[f64], published: &[f64], workload: &QueryWorkload) -> tops_core::Result<f64> {
    let prefix = prefix_sums(published.iter().copied());
    Ok(evaluate_with(truth, workload, |i, j| Ok(prefix[j] - prefix[i - 1]))?.mse)
}

struct Cell<'a> {
    config: &'a BenchConfig,
    data: &'a Dataset,
    workload: &'a QueryWorkload,
    threshold_eps: f64,
    release_eps: f64,
    smoother: SmootherKind,
    rng: RandomSource,
}

impl Cell<'_> {
    fn region(&self) -> &[f64] {
        &self.data.values[self.config.m..]
    }

    fn holdout(&self) -> &[f64] {
        &self.data.values[..self.config.m]
    }

    fn stream(&self, holdout: usize) -> StreamConfig {
        let mut stream = StreamConfig::new(self.data.bound, self.release_eps, holdout)
            .with_range(self.config.r)
            .with_fanout(self.config.b)
            .with_threshold_epsilon(self.threshold_eps);
        stream.bias_scale = self.config.c;
        stream
    }

    fn decomposition(&self, fanout: u32, consistent: bool, theta: f64) -> tops_core::Result<f64> {
        let plan = HierarchyPlan::new(fanout, self.config.r, self.release_eps, 0)?;
        let clipped: Vec<f64> = self.region().iter().map(|&v| threshold::truncate(v, theta)).collect();
        let release = HierarchyRelease::build(plan, theta, &clipped, &self.rng.derive(streams::PERTURBER), consistent)?;
        Ok(evaluate_with(self.region(), self.workload, |i, j| release.answer_groups(i as u64 - 1, j as u64 - 1))?.mse)
    }

    fn smoothed(&self, theta: f64) -> tops_core::Result<f64> {
        let mut config = PipelineConfig::new(Mode::Tops, self.stream(0));
        config.fixed_theta = Some(theta);
        config.smoother = self.smoother;
        let out = pipeline::run(self.region(), &config, self.rng.clone())?;
        let published: Vec<f64> = out.published.iter().map(|p| p.unwrap_or(0.0)).collect();
        score_published(self.region(), &published, self.workload)
    }

    fn full_pipeline(&self, mode: Mode) -> tops_core::Result<Answers> {
        let mut config = PipelineConfig::new(mode, self.stream(self.config.m));
        config.smoother = self.smoother;
        config.pak = self.config.pak.clone();
        let out = pipeline::run(&self.data.values, &config, self.rng.clone())?;
        let published: Vec<f64> = out.published[self.config.m..].iter().map(|p| p.unwrap_or(0.0)).collect();
        Ok(Answers {
            theta: Some(out.summary.decision.theta),
            mse: score_published(self.region(), &published, self.workload)?,
        })
    }

    fn threshold(&self, method: Method) -> tops_core::Result<f64> {
        let m = self.config.m;
        let stream = self.stream(m);
        let mut rng = self.rng.derive(streams::THRESHOLD);
        let decision = match method {
            Method::EmE => em_threshold(self.holdout(), &stream, &mut rng)?,
            Method::SPak | Method::Pak => pak_threshold(self.holdout(), &self.config.pak, &stream, &mut rng)?,
            Method::SP => {
                let delta = self.config.pak.delta_for(m);
                sp_threshold(self.holdout(), self.config.pak.percentile, delta, &stream, &mut rng)?
            }
            Method::Oracle => oracle_threshold(self.region(), &stream)?,
            _ => return Err(tops_core::Error::InvalidParameter(format!("{} selects no threshold", method.label()))),
        };
        Ok(decision.theta)
    }

    fn run(&self, method: Method) -> tops_core::Result<Answers> {
        let bound = self.data.bound;
        let fixed = |mse| Answers { theta: Some(bound), mse };
        match method {
            Method::Base => Ok(Answers {
                theta: None,
                mse: evaluate_with(self.region(), self.workload, |_, _| Ok(0.0))?.mse,
            }),
            Method::H2 => Ok(fixed(self.decomposition(2, false, bound)?)),
            Method::H16 => Ok(fixed(self.decomposition(16, false, bound)?)),
            Method::H16c => Ok(fixed(self.decomposition(16, true, bound)?)),
            Method::SmoothedH16c => Ok(fixed(self.smoothed(bound)?)),
            Method::EmE | Method::SPak | Method::SP | Method::Oracle => {
                let theta = self.threshold(method)?;
                Ok(Answers {
                    theta: Some(theta),
                    mse: self.smoothed(theta)?,
                })
            }
            Method::Pak => {
                let theta = self.threshold(method)?;
                Ok(Answers {
                    theta: Some(theta),
                    mse: self.decomposition(2, false, theta)?,
                })
            }
            Method::Tops => self.full_pipeline(Mode::Tops),
            Method::Topl => self.full_pipeline(Mode::Topl),
        }
    }
}

/// One CSV row per (method, ε).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub method: String,
    pub epsilon: f64,
    pub mse_mean: Option<f64>,
    pub mse_std: Option<f64>,
    pub mse_median: Option<f64>,
    pub theta_median: Option<f64>,
    pub repetitions: usize,
    pub failures: usize,
    pub query_mode: QueryMode,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct CellRow<'a> {
    method: &'a str,
    epsilon: f64,
    repetition: usize,
    theta: Option<f64>,
    mse: Option<f64>,
    error: Option<&'a str>,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub cells: Vec<CellResult>,
}

/// Run every cell. Cells run in parallel; the report order is fixed by the config.
pub fn run_bench(config: &BenchConfig, seed: u64) -> Result<BenchReport> {
    config.validate()?;
    let file = load_file(config)?;
    let mechanism_seed = config.mechanism_seed.unwrap_or(seed);
    let smoother = config.smoother.to_kind()?;
    let combos: Vec<(f64, Method)> = config
        .epsilons
        .iter()
        .flat_map(|&e| config.methods.iter().map(move |&m| (e, m)))
        .collect();

    let per_rep: Vec<Vec<CellResult>> = (0..config.repetitions)
        .into_par_iter()
        .map(|rep| -> Result<Vec<CellResult>> {
            let data = dataset_for(config, seed, rep, file.as_ref())?;
            let workload = workload_for(config, seed, rep, data.values.len() - config.m)?;
            let base = RandomSource::new(mechanism_seed, 0).derive(rep as u64);
            Ok(combos
                .par_iter()
                .map(|&(epsilon, method)| {
                    let cell = Cell {
                        config,
                        data: &data,
                        workload: &workload,
                        threshold_eps: config.threshold_epsilon.unwrap_or(epsilon),
                        release_eps: config.release_epsilon.unwrap_or(epsilon),
                        smoother,
                        rng: base.derive(epsilon.to_bits()).derive(method.tag()),
                    };
                    let outcome = cell.run(method);
                    if let Err(e) = &outcome {
                        log::warn!("{} ε={epsilon} rep {rep}: {e}", method.label());
                    }
                    CellResult {
                        method,
                        epsilon,
                        repetition: rep,
                        theta: outcome.as_ref().ok().and_then(|a| a.theta),
                        mse: outcome.map(|a| a.mse).map_err(|e| e.to_string()),
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(combos.len());
    for (k, &(epsilon, method)) in combos.iter().enumerate() {
        let cells: Vec<&CellResult> = per_rep.iter().map(|cells| &cells[k]).collect();
        let mses: Vec<f64> = cells.iter().filter_map(|c| c.mse.as_ref().ok().copied()).collect();
        let thetas: Vec<f64> = cells.iter().filter_map(|c| c.theta).collect();
        let summary = (!mses.is_empty()).then(|| summarize(&mses));
        rows.push(BenchRow {
            method: method.label().to_string(),
            epsilon,
            mse_mean: summary.map(|s| s.mean),
            mse_std: summary.map(|s| s.std),
            mse_median: (!mses.is_empty()).then(|| median(&mses)),
            theta_median: (!thetas.is_empty()).then(|| median(&thetas)),
            repetitions: mses.len(),
            failures: cells.len() - mses.len(),
            query_mode: config.query_mode,
        });
    }
    let cells = per_rep.into_iter().flatten().collect();
    Ok(BenchReport { rows, cells })
}

pub fn write_rows(path: Option<&Path>, rows: &[BenchRow]) -> Result<()> {
    let label = path.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("<stdout>"));
    let mut w = csv::Writer::from_writer(sink(path)?);
    for row in rows {
        w.serialize(row).map_err(|e| ToolError::config(format!("{}: {e}", label.display())))?;
    }
    w.flush().map_err(|source| ToolError::Unwritable { path: label, source })
}

/// Per-repetition results, one row per cell.
pub fn write_cells(path: &Path, cells: &[CellResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink(Some(path))?);
    for c in cells {
        w.serialize(CellRow {
            method: c.method.label(),
            epsilon: c.epsilon,
            repetition: c.repetition,
            theta: c.theta,
            mse: c.mse.as_ref().ok().copied(),
            error: c.mse.as_ref().err().map(String::as_str),
        })
        .map_err(|e| ToolError::config(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|source| ToolError::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}
