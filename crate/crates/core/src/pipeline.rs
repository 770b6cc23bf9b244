//! End-to-end release: holdout, threshold, truncation, perturbation, smoothing.
//!
//! [`Pipeline`] is a push-based state machine. The first `m` readings are held
//! out to choose the threshold and produce no output; every later reading
//! produces exactly one published value.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::ldp::{self, DensityEstimate, EmConfig, SwParams};
use crate::perturber::{plan_hierarchy, HierarchyPlan, PublishedAggregate, Perturber};
use crate::rng::{streams, RandomSource};
use crate::smoother::{optimize_s, SmootherKind, SmootherState};
use crate::threshold::{self, PakParams, StreamConfig, ThresholdDecision};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Central DP: EM threshold, consistent hierarchy, smoother.
    #[default]
    Tops,
    /// Local DP: Square Wave threshold, hybrid per-reading reports.
    Topl,
    /// Smooth-sensitivity threshold with a plain binary hierarchy.
    Pak,
}

impl Mode {
    pub fn label(&self) -> &'static str {
        match self {
            Mode::Tops => "tops",
            Mode::Topl => "topl",
            Mode::Pak => "pak",
        }
    }
}

/// How the threshold stage and the release stage share the budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Composition {
    /// Disjoint readings, so each stage gets the full budget.
    #[default]
    Parallel,
    /// Conservative split: the threshold stage gets `threshold_share·ε`, the rest goes to release.
    Sequential { threshold_share: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub stream: StreamConfig,
    #[serde(default)]
    pub smoother: SmootherKind,
    #[serde(default)]
    pub composition: Composition,
    #[serde(default)]
    pub pak: PakParams,
    #[serde(default)]
    pub em: EmConfig,
    /// Skip the threshold stage and use this θ.
    #[serde(default)]
    pub fixed_theta: Option<f64>,
    /// Use this many smoothed levels instead of the error-model choice.
    #[serde(default)]
    pub smoothed_levels: Option<u32>,
    /// Test hook: release without noise.
    #[serde(default)]
    pub noiseless: bool,
}

impl PipelineConfig {
    pub fn new(mode: Mode, stream: StreamConfig) -> Self {
        Self {
            mode,
            stream,
            smoother: SmootherKind::default(),
            composition: Composition::default(),
            pak: PakParams::default(),
            em: EmConfig::default(),
            fixed_theta: None,
            smoothed_levels: None,
            noiseless: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.smoother.validate()?;
        if let Composition::Sequential { threshold_share } = self.composition {
            if !(threshold_share > 0.0 && threshold_share < 1.0) {
                return Err(Error::invalid("sequential threshold share must lie in (0, 1)"));
            }
        }
        if let Some(theta) = self.fixed_theta {
            if !(theta > 0.0 && theta.is_finite()) {
                return Err(Error::invalid("fixed threshold must be positive"));
            }
        }
        if self.mode == Mode::Topl && self.stream.holdout == 0 && self.fixed_theta.is_none() {
            return Err(Error::invalid("the local threshold phase needs at least one report (m >= 1)"));
        }
        Ok(())
    }

    /// (threshold ε, release ε) after applying the composition rule.
    pub fn stage_budgets(&self) -> (f64, f64) {
        let threshold = self.stream.threshold_budget();
        match self.composition {
            Composition::Parallel => (threshold, self.stream.epsilon),
            Composition::Sequential { threshold_share } => (threshold * threshold_share, self.stream.epsilon * (1.0 - threshold_share)),
        }
    }
}

/// Which phase a simulated client report belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportPhase {
    Threshold,
    Stream,
}

impl ReportPhase {
    pub fn label(&self) -> &'static str {
        match self {
            ReportPhase::Threshold => "threshold",
            ReportPhase::Stream => "stream",
        }
    }
}

/// One client-side report in local mode; `user` is the 1-based reading index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub user: u64,
    pub phase: ReportPhase,
    pub report: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub stage: String,
    pub mechanism: String,
    pub epsilon: f64,
    pub delta: f64,
    /// First reading (1-based) the stage touches.
    pub first_index: u64,
    /// Last reading, `None` for the open-ended stream.
    pub last_index: Option<u64>,
    /// Hierarchy levels sharing `epsilon` sequentially.
    pub levels: Option<u32>,
    pub level_epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BudgetLedger {
    pub composition: Composition,
    pub entries: Vec<LedgerEntry>,
}

impl BudgetLedger {
    /// Total ε under the ledger's composition rule.
    pub fn total_epsilon(&self) -> f64 {
        match self.composition {
            Composition::Parallel => self.entries.iter().map(|e| e.epsilon).fold(0.0, f64::max),
            Composition::Sequential { .. } => self.entries.iter().map(|e| e.epsilon).sum(),
        }
    }

    pub fn total_delta(&self) -> f64 {
        match self.composition {
            Composition::Parallel => self.entries.iter().map(|e| e.delta).fold(0.0, f64::max),
            Composition::Sequential { .. } => self.entries.iter().map(|e| e.delta).sum(),
        }
    }
}

#[derive(Debug, Clone)]
enum Stage {
    Holdout,
    Hierarchy {
        perturber: Perturber,
        smoother: Option<SmootherState>,
    },
    Local {
        clients: RandomSource,
        theta: f64,
        epsilon: f64,
    },
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    config: PipelineConfig,
    rng: RandomSource,
    holdout: Vec<f64>,
    reports: Vec<f64>,
    index: u64,
    stage: Stage,
    decision: Option<ThresholdDecision>,
    smoothed: Option<u32>,
    plan: Option<HierarchyPlan>,
    density: Option<DensityEstimate>,
    ledger: BudgetLedger,
    aggregates: Vec<PublishedAggregate>,
    client_reports: Vec<ClientReport>,
    warnings: Vec<String>,
}

/// Everything a finished run produced besides the published values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub decision: ThresholdDecision,
    pub smoothed: Option<u32>,
    pub plan: Option<HierarchyPlan>,
    pub ledger: BudgetLedger,
    pub warnings: Vec<String>,
    pub readings: u64,
    #[serde(skip)]
    pub density: Option<DensityEstimate>,
    #[serde(skip)]
    pub aggregates: Vec<PublishedAggregate>,
    /// Raw client reports, local mode only.
    #[serde(skip)]
    pub client_reports: Vec<ClientReport>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, rng: RandomSource) -> Result<Self> {
        config.validate()?;
        let composition = config.composition;
        let mut pipeline = Self {
            config,
            rng,
            holdout: Vec::new(),
            reports: Vec::new(),
            index: 0,
            stage: Stage::Holdout,
            decision: None,
            smoothed: None,
            plan: None,
            density: None,
            ledger: BudgetLedger {
                composition,
                entries: Vec::new(),
            },
            aggregates: Vec::new(),
            client_reports: Vec::new(),
            warnings: Vec::new(),
        };
        if pipeline.config.stream.holdout == 0 {
            pipeline.start_release()?;
        }
        Ok(pipeline)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn decision(&self) -> Option<&ThresholdDecision> {
        self.decision.as_ref()
    }

    /// Feed reading `v`. `None` while the reading is part of the holdout.
    pub fn push(&mut self, v: f64) -> Result<Option<f64>> {
        let bound = self.config.stream.bound;
        if !(0.0..=bound).contains(&v) {
            return Err(Error::DataContract {
                index: self.index as usize + 1,
                reason: alloc::format!("reading {v} outside [0, B = {bound}]"),
            });
        }
        self.index += 1;
        if matches!(self.stage, Stage::Holdout) {
            self.hold(v)?;
            if self.index == self.config.stream.holdout as u64 {
                self.start_release()?;
            }
            return Ok(None);
        }
        self.release(v).map(Some)
    }

    fn hold(&mut self, v: f64) -> Result<()> {
        if self.config.mode == Mode::Topl {
            let (threshold_eps, _) = self.config.stage_budgets();
            let sw = SwParams::new(threshold_eps)?;
            let mut client = self.rng.derive(streams::CLIENTS_HOLDOUT).derive(self.index);
            let unit = ldp::to_unit(v, 0.0, self.config.stream.bound);
            let report = ldp::sw_perturb(unit, &sw, &mut client)?;
            self.reports.push(report);
            self.client_reports.push(ClientReport {
                user: self.index,
                phase: ReportPhase::Threshold,
                report,
            });
        } else {
            self.holdout.push(v);
        }
        Ok(())
    }

    fn choose_threshold(&mut self) -> Result<ThresholdDecision> {
        if let Some(theta) = self.config.fixed_theta {
            return ThresholdDecision::fixed(theta);
        }
        let (threshold_eps, release_eps) = self.config.stage_budgets();
        let stream = StreamConfig {
            epsilon: release_eps,
            threshold_epsilon: Some(threshold_eps),
            ..self.config.stream.clone()
        };
        let mut rng = self.rng.derive(streams::THRESHOLD);
        let m = self.index.min(stream.holdout as u64);
        let decision = match self.config.mode {
            Mode::Tops => threshold::em_threshold(&self.holdout, &stream, &mut rng)?,
            Mode::Pak => threshold::pak_threshold(&self.holdout, &self.config.pak, &stream, &mut rng)?,
            Mode::Topl => {
                let sw = SwParams::new(threshold_eps)?;
                let est = ldp::sw_estimate(&self.reports, &sw, stream.bound, &self.config.em)?;
                let pruned = ldp::prune_density(&est);
                let decision = ldp::ldp_threshold(&pruned, release_eps, stream.range, m as usize)?;
                self.density = Some(pruned);
                ThresholdDecision {
                    epsilon: threshold_eps,
                    ..decision
                }
            }
        };
        let (mechanism, delta) = match self.config.mode {
            Mode::Tops => ("exponential", 0.0),
            Mode::Pak => ("smooth-sensitivity laplace", self.config.pak.delta_for(m as usize)),
            Mode::Topl => ("square wave", 0.0),
        };
        self.ledger.entries.push(LedgerEntry {
            stage: "threshold".to_string(),
            mechanism: mechanism.to_string(),
            epsilon: threshold_eps,
            delta,
            first_index: 1,
            last_index: Some(m),
            levels: None,
            level_epsilon: None,
        });
        Ok(decision)
    }

    fn start_release(&mut self) -> Result<()> {
        let decision = self.choose_threshold()?;
        let theta = decision.theta;
        if theta >= self.config.stream.bound && self.config.fixed_theta.is_none() {
            let msg = alloc::format!("threshold {theta} reaches the bound {}; truncation is a no-op", self.config.stream.bound);
            log::warn!("{msg}");
            self.warnings.push(msg);
        }
        let (_, release_eps) = self.config.stage_budgets();
        let first = self.config.stream.holdout as u64 + 1;
        match self.config.mode {
            Mode::Tops | Mode::Pak => {
                let mut stream = self.config.stream.clone();
                stream.epsilon = release_eps;
                let consistent = self.config.mode == Mode::Tops;
                if self.config.mode == Mode::Pak {
                    stream.fanout = 2;
                }
                let s = match (self.config.mode, self.config.smoothed_levels) {
                    (Mode::Pak, _) => 0,
                    (_, Some(s)) => s,
                    (_, None) => optimize_s(theta, release_eps, stream.range, stream.fanout)?,
                };
                let plan = plan_hierarchy(&stream, s)?;
                let base = self.rng.derive(streams::PERTURBER);
                let perturber = if self.config.noiseless {
                    Perturber::noiseless(plan, theta)
                } else {
                    Perturber::with_options(plan, theta, base, consistent)?
                };
                let smoother = if s > 0 {
                    Some(SmootherState::new(self.config.smoother, plan.group_size(), theta)?)
                } else {
                    None
                };
                self.ledger.entries.push(LedgerEntry {
                    stage: "perturber".to_string(),
                    mechanism: "laplace hierarchy".to_string(),
                    epsilon: release_eps,
                    delta: 0.0,
                    first_index: first,
                    last_index: None,
                    levels: Some(plan.active_levels()),
                    level_epsilon: Some(plan.level_epsilon()),
                });
                self.smoothed = Some(s);
                self.plan = Some(plan);
                self.stage = Stage::Hierarchy { perturber, smoother };
            }
            Mode::Topl => {
                self.ledger.entries.push(LedgerEntry {
                    stage: "reports".to_string(),
                    mechanism: "hybrid".to_string(),
                    epsilon: release_eps,
                    delta: 0.0,
                    first_index: first,
                    last_index: None,
                    levels: None,
                    level_epsilon: None,
                });
                self.stage = Stage::Local {
                    clients: self.rng.derive(streams::CLIENTS_STREAM),
                    theta,
                    epsilon: release_eps,
                };
            }
        }
        self.decision = Some(decision);
        self.holdout = Vec::new();
        self.reports = Vec::new();
        Ok(())
    }

    fn release(&mut self, v: f64) -> Result<f64> {
        let noiseless = self.config.noiseless;
        match &mut self.stage {
            Stage::Hierarchy { perturber, smoother } => {
                let x = threshold::truncate(v, perturber.theta());
                match smoother {
                    None => {
                        let a = perturber.ingest(x)?.ok_or_else(|| Error::invalid("group of one did not close"))?;
                        self.aggregates.push(a);
                        Ok(a.value)
                    }
                    Some(sm) => {
                        let out = sm.estimate();
                        if let Some(a) = perturber.ingest(x)? {
                            sm.push(a.value);
                            self.aggregates.push(a);
                        }
                        Ok(out)
                    }
                }
            }
            Stage::Local { clients, theta, epsilon } => {
                let x = threshold::truncate(v, *theta);
                if noiseless {
                    return Ok(x);
                }
                let y = ldp::encode_reading(x, *theta, *epsilon, clients)?;
                self.client_reports.push(ClientReport {
                    user: self.index,
                    phase: ReportPhase::Stream,
                    report: y,
                });
                Ok(ldp::decode_report(y, *theta))
            }
            Stage::Holdout => Err(Error::invalid("release before the threshold stage")),
        }
    }

    /// Close the stream. Runs the threshold stage when the stream ended inside the holdout.
    pub fn finish(mut self) -> Result<RunSummary> {
        if matches!(self.stage, Stage::Holdout) {
            self.start_release()?;
        }
        if let Stage::Hierarchy { perturber, .. } = &mut self.stage {
            if let Some(a) = perturber.flush()? {
                self.aggregates.push(a);
            }
        }
        let decision = self.decision.ok_or_else(|| Error::invalid("no threshold decision"))?;
        Ok(RunSummary {
            mode: self.config.mode,
            decision,
            smoothed: self.smoothed,
            plan: self.plan,
            ledger: self.ledger,
            warnings: self.warnings,
            readings: self.index,
            density: self.density,
            aggregates: self.aggregates,
            client_reports: self.client_reports,
        })
    }
}

/// A finished run: one entry per reading, `None` for held-out readings.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub summary: RunSummary,
    pub published: Vec<Option<f64>>,
}

/// Run a whole finite stream through the pipeline.
pub fn run(values: &[f64], config: &PipelineConfig, rng: RandomSource) -> Result<PipelineRun> {
    let mut pipeline = Pipeline::new(config.clone(), rng)?;
    let mut published = Vec::with_capacity(values.len());
    for &v in values {
        published.push(pipeline.push(v)?);
    }
    Ok(PipelineRun {
        summary: pipeline.finish()?,
        published,
    })
}

pub fn tops_run(values: &[f64], config: &PipelineConfig, rng: RandomSource) -> Result<PipelineRun> {
    run(values, &PipelineConfig { mode: Mode::Tops, ..config.clone() }, rng)
}

pub fn topl_run(values: &[f64], config: &PipelineConfig, rng: RandomSource) -> Result<PipelineRun> {
    run(values, &PipelineConfig { mode: Mode::Topl, ..config.clone() }, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeAnswer {
    pub value: f64,
    /// Some indices fell in the holdout and contributed nothing.
    pub partial: bool,
}

/// `Σ_{k=i..j} ṽ_k` over published values, 1-based inclusive.
pub fn answer_range_query(published: &[Option<f64>], range: u64, i: usize, j: usize) -> Result<RangeAnswer> {
    if i == 0 || i > j || j > published.len() {
        return Err(Error::InvalidQuery {
            start: i,
            end: j,
            reason: alloc::format!("outside 1..={}", published.len()),
        });
    }
    if (j - i + 1) as u64 > range {
        return Err(Error::InvalidQuery {
            start: i,
            end: j,
            reason: alloc::format!("longer than the range limit {range}"),
        });
    }
    let mut value = 0.0;
    let mut partial = false;
    for p in &published[i - 1..j] {
        match p {
            Some(v) => value += v,
            None => partial = true,
        }
    }
    Ok(RangeAnswer { value, partial })
}
