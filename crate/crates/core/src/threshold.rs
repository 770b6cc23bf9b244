//! Truncation threshold selection from the holdout prefix of a stream.
//!
//! [`em_threshold`] scores every candidate `θ` by a low-sensitivity proxy of the
//! range-query error (hierarchy noise grows linearly in `θ`, truncation bias is
//! approximated by the count of holdout values above `θ`) and samples with the
//! exponential mechanism. [`pak_threshold`] and [`sp_threshold`] are the
//! smooth-sensitivity percentile baselines.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::mechanisms::{
    exp_mechanism, quantile_rank, smooth_sensitivity_quantile, standard_laplace, standard_laplace_quantile,
    EmCandidateSet, SmoothNoise, SmoothSensParams,
};
use crate::rng::RandomSource;
use crate::{Error, Result};

/// Default bias-scaling constant `c`.
pub const DEFAULT_BIAS_SCALE: f64 = 60.0;
/// Default fan-out of the hierarchy.
pub const DEFAULT_FANOUT: u32 = 16;
/// Default maximal query range, `2^20`.
pub const DEFAULT_RANGE: u64 = 1 << 20;

/// The set of thresholds considered by the selectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateGrid {
    /// `stride, 2·stride, …` up to `⌊B⌋`. `stride = 1` gives every integer in `[1, B]`.
    Integers { stride: u64 },
    /// `count` points `i·B/count`, `i = 1..=count`.
    Uniform { count: usize },
    Explicit(Vec<f64>),
}

impl Default for CandidateGrid {
    fn default() -> Self {
        CandidateGrid::Integers { stride: 1 }
    }
}

impl CandidateGrid {
    /// Ascending candidate values inside `(0, bound]`.
    pub fn values(&self, bound: f64) -> Result<Vec<f64>> {
        let values: Vec<f64> = match self {
            CandidateGrid::Integers { stride } => {
                if *stride == 0 {
                    return Err(Error::invalid("grid stride must be positive"));
                }
                let top = math::floor(bound) as u64;
                (1..=top / stride).map(|i| (i * stride) as f64).collect()
            }
            CandidateGrid::Uniform { count } => (1..=*count).map(|i| i as f64 * bound / *count as f64).collect(),
            CandidateGrid::Explicit(v) => {
                let mut v = v.clone();
                v.sort_by(f64::total_cmp);
                v.dedup();
                v
            }
        };
        if values.is_empty() {
            return Err(Error::invalid("candidate grid is empty"));
        }
        if values[0] <= 0.0 || values[values.len() - 1] > bound {
            return Err(Error::invalid("candidate grid must lie in (0, B]"));
        }
        Ok(values)
    }
}

/// Parameters shared by the threshold selector and the perturber.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    /// Public upper bound `B` on every reading.
    pub bound: f64,
    /// Maximal query range `r`; also the chunk length of the hierarchy.
    pub range: u64,
    /// Fan-out `b` of the hierarchy.
    pub fanout: u32,
    /// Budget of the perturber.
    pub epsilon: f64,
    /// Budget of threshold selection; defaults to `epsilon`.
    #[serde(default)]
    pub threshold_epsilon: Option<f64>,
    /// Holdout length `m`.
    pub holdout: usize,
    /// Bias-scaling constant `c`.
    pub bias_scale: f64,
    #[serde(default)]
    pub grid: CandidateGrid,
    /// Use the monotone-quality form of the exponential mechanism (exponent divisor 1).
    pub monotone: bool,
}

impl StreamConfig {
    pub fn new(bound: f64, epsilon: f64, holdout: usize) -> Self {
        Self {
            bound,
            range: DEFAULT_RANGE,
            fanout: DEFAULT_FANOUT,
            epsilon,
            threshold_epsilon: None,
            holdout,
            bias_scale: DEFAULT_BIAS_SCALE,
            grid: CandidateGrid::default(),
            monotone: true,
        }
    }

    pub fn with_range(mut self, range: u64) -> Self {
        self.range = range;
        self
    }

    pub fn with_fanout(mut self, fanout: u32) -> Self {
        self.fanout = fanout;
        self
    }

    pub fn with_threshold_epsilon(mut self, epsilon: f64) -> Self {
        self.threshold_epsilon = Some(epsilon);
        self
    }

    pub fn with_grid(mut self, grid: CandidateGrid) -> Self {
        self.grid = grid;
        self
    }

    pub fn threshold_budget(&self) -> f64 {
        self.threshold_epsilon.unwrap_or(self.epsilon)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bound > 0.0 && self.bound.is_finite()) {
            return Err(Error::invalid("bound B must be positive and finite"));
        }
        if self.fanout < 2 {
            return Err(Error::invalid("fan-out must be at least 2"));
        }
        if self.range < self.fanout as u64 {
            return Err(Error::invalid("range r must be at least the fan-out"));
        }
        if !(self.epsilon > 0.0) || !(self.threshold_budget() > 0.0) {
            return Err(Error::invalid("privacy budgets must be positive"));
        }
        if !(self.bias_scale > 0.0) {
            return Err(Error::invalid("bias scale c must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdMethod {
    #[serde(rename = "EM-E")]
    EmE,
    #[serde(rename = "S-PAK")]
    SPak,
    #[serde(rename = "S-P")]
    SP,
    #[serde(rename = "SW-W")]
    SwW,
    #[serde(rename = "fixed")]
    Fixed,
    /// Non-private minimiser of the range-error model over the full data.
    #[serde(rename = "oracle")]
    Oracle,
}

impl ThresholdMethod {
    pub fn label(&self) -> &'static str {
        match self {
            ThresholdMethod::EmE => "EM-E",
            ThresholdMethod::SPak => "S-PAK",
            ThresholdMethod::SP => "S-P",
            ThresholdMethod::SwW => "SW-W",
            ThresholdMethod::Fixed => "fixed",
            ThresholdMethod::Oracle => "oracle",
        }
    }
}

/// Intermediate values behind a threshold decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdTrace {
    /// One score (EM-E) or error estimate (SW-W) per candidate.
    Scores { candidates: Vec<f64>, scores: Vec<f64> },
    SmoothSensitivity {
        quantile: f64,
        rank: usize,
        smooth_sensitivity: f64,
        noise_scaler: f64,
        kappa: f64,
        noise: f64,
        unclamped: f64,
    },
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdDecision {
    pub theta: f64,
    pub method: ThresholdMethod,
    pub epsilon: f64,
    pub m: usize,
    pub trace: ThresholdTrace,
}

impl ThresholdDecision {
    pub fn fixed(theta: f64) -> Result<Self> {
        if !(theta > 0.0) {
            return Err(Error::invalid("threshold must be positive"));
        }
        Ok(Self {
            theta,
            method: ThresholdMethod::Fixed,
            epsilon: 0.0,
            m: 0,
            trace: ThresholdTrace::None,
        })
    }
}

/// `min(v, θ)`.
#[inline]
pub fn truncate(v: f64, theta: f64) -> f64 {
    if v > theta {
        theta
    } else {
        v
    }
}

fn check_holdout(values: &[f64], bound: f64) -> Result<()> {
    if values.is_empty() {
        return Err(Error::invalid("empty holdout"));
    }
    if let Some(index) = values.iter().position(|v| !(*v >= 0.0 && *v <= bound)) {
        return Err(Error::DataContract {
            index,
            reason: alloc::format!("holdout value {} outside [0, {}]", values[index], bound),
        });
    }
    Ok(())
}

/// Per-unit-θ weight of the noise term: `3m/(c·r·ε) · sqrt(2(b−1)·log_b³ r)`.
pub fn noise_weight(m: usize, config: &StreamConfig) -> f64 {
    let r = config.range as f64;
    let b = config.fanout as f64;
    let levels = math::ln(r) / math::ln(b);
    3.0 * m as f64 / (config.bias_scale * r * config.epsilon) * math::sqrt(2.0 * (b - 1.0) * levels * levels * levels)
}

/// Quality score of every grid candidate:
/// `q(θ) = −noise_weight·θ − |{i : v_i > θ}|`.
///
/// The second term changes by at most one when a single holdout value changes,
/// and all candidates move in the same direction.
pub fn quality_scores(values: &[f64], config: &StreamConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    config.validate()?;
    check_holdout(values, config.bound)?;
    let grid = config.grid.values(config.bound)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let weight = noise_weight(m, config);

    let mut below = 0usize;
    let scores = grid
        .iter()
        .map(|&theta| {
            while below < m && sorted[below] <= theta {
                below += 1;
            }
            -weight * theta - (m - below) as f64
        })
        .collect();
    Ok((grid, scores))
}

/// Threshold selection with the exponential mechanism (EM-E).
pub fn em_threshold(values: &[f64], config: &StreamConfig, rng: &mut RandomSource) -> Result<ThresholdDecision> {
    let (grid, scores) = quality_scores(values, config)?;
    let epsilon = config.threshold_budget();
    let set = EmCandidateSet::new(grid, scores, 1.0, config.monotone)?;
    let index = exp_mechanism(&set, epsilon, rng)?;
    let theta = set.candidates()[index];
    Ok(ThresholdDecision {
        theta,
        method: ThresholdMethod::EmE,
        epsilon,
        m: values.len(),
        trace: ThresholdTrace::Scores {
            candidates: set.candidates().to_vec(),
            scores: set.scores().to_vec(),
        },
    })
}

/// Expected squared error of a range query when truncating at `θ`:
/// `(b−1)·log_b³ r · 2θ²/ε² + ((r/3)·Σ_{t>θ} Pr[v = t]·(t − θ))²`,
/// with `Pr` the empirical distribution of `values`.
pub fn range_error_model(values: &[f64], theta: f64, config: &StreamConfig) -> f64 {
    let excess = values.iter().map(|&v| if v > theta { v - theta } else { 0.0 }).sum::<f64>() / values.len() as f64;
    range_error_terms(theta, excess, config)
}

fn range_error_terms(theta: f64, excess: f64, config: &StreamConfig) -> f64 {
    let r = config.range as f64;
    let b = config.fanout as f64;
    let levels = math::ln(r) / math::ln(b);
    let noise = (b - 1.0) * levels * levels * levels * 2.0 * theta * theta / (config.epsilon * config.epsilon);
    let bias = r / 3.0 * excess;
    noise + bias * bias
}

/// Grid candidate minimising [`range_error_model`]; not private, used as a reference.
pub fn oracle_threshold(values: &[f64], config: &StreamConfig) -> Result<ThresholdDecision> {
    config.validate()?;
    check_holdout(values, config.bound)?;
    let grid = config.grid.values(config.bound)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // suffix sums of the sorted values
    let mut tail = alloc::vec![0.0; n + 1];
    for i in (0..n).rev() {
        tail[i] = tail[i + 1] + sorted[i];
    }
    let mut below = 0usize;
    let costs: Vec<f64> = grid
        .iter()
        .map(|&theta| {
            while below < n && sorted[below] <= theta {
                below += 1;
            }
            let excess = (tail[below] - (n - below) as f64 * theta) / n as f64;
            range_error_terms(theta, excess, config)
        })
        .collect();
    let negated: Vec<f64> = costs.iter().map(|c| -c).collect();
    let best = argmax_score(&negated).ok_or_else(|| Error::invalid("empty candidate grid"))?;
    Ok(ThresholdDecision {
        theta: grid[best],
        method: ThresholdMethod::Oracle,
        epsilon: 0.0,
        m: n,
        trace: ThresholdTrace::Scores {
            candidates: grid,
            scores: costs,
        },
    })
}

/// Index of the best score, ties going to the smaller candidate.
pub fn argmax_score(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if scores[b] >= s => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Parameters of the PAK percentile threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PakParams {
    /// Target percentile in `(0, 100)`.
    pub percentile: f64,
    /// Failure probability `β` of undershooting the percentile.
    pub failure: f64,
    /// `δ`; `1/m²` when unset.
    pub delta: Option<f64>,
    pub noise: SmoothNoise,
}

impl Default for PakParams {
    fn default() -> Self {
        Self {
            percentile: 99.575,
            failure: 0.3 * 0.02,
            delta: None,
            noise: SmoothNoise::Laplace,
        }
    }
}

impl PakParams {
    pub fn delta_for(&self, m: usize) -> f64 {
        self.delta.unwrap_or_else(|| 1.0 / (m as f64 * m as f64))
    }

    /// Correction `κ = (1 − (e^b − 1)·G⁻¹(1−β)/a)⁻¹`; depends only on public parameters.
    pub fn kappa(&self, smoothing: f64, noise_scaler: f64) -> Result<f64> {
        let shift = standard_laplace_quantile(1.0 - self.failure);
        let denom = 1.0 - math::expm1(smoothing) * shift / noise_scaler;
        if !(denom > 0.0) {
            return Err(Error::DegenerateParameter(alloc::format!(
                "PAK correction denominator {denom} is not positive"
            )));
        }
        Ok(1.0 / denom)
    }
}

fn smooth_quantile_setup(
    values: &[f64],
    percentile: f64,
    epsilon: f64,
    delta: f64,
    bound: f64,
) -> Result<(Vec<f64>, SmoothSensParams, f64, f64)> {
    check_holdout(values, bound)?;
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::invalid("percentile must lie in (0, 100]"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = quantile_rank(percentile, sorted.len());
    let params = SmoothSensParams::laplace(epsilon, delta, rank)?;
    let quantile = sorted[rank - 1];
    let ss = smooth_sensitivity_quantile(&sorted, &params, bound)?;
    Ok((sorted, params, quantile, ss))
}

/// `x̂ + κ·SS·(Z + shift)/a`, the released threshold before clamping.
pub fn inflated_threshold(quantile: f64, smooth_sensitivity: f64, kappa: f64, noise_scaler: f64, z: f64, shift: f64) -> f64 {
    quantile + kappa * smooth_sensitivity * (z + shift) / noise_scaler
}

fn clamp_threshold(theta: f64, floor: f64, bound: f64) -> f64 {
    if theta.is_nan() {
        return bound;
    }
    theta.clamp(floor, bound)
}

/// PAK threshold (S-PAK): an inflated smooth-sensitivity percentile, clamped to `[grid min, B]`.
pub fn pak_threshold(
    values: &[f64],
    params: &PakParams,
    config: &StreamConfig,
    rng: &mut RandomSource,
) -> Result<ThresholdDecision> {
    config.validate()?;
    if !(params.failure > 0.0 && params.failure < 1.0) {
        return Err(Error::invalid("failure probability must lie in (0, 1)"));
    }
    let epsilon = config.threshold_budget();
    let delta = params.delta_for(values.len());
    let (_, ss_params, quantile, ss) = smooth_quantile_setup(values, params.percentile, epsilon, delta, config.bound)?;
    let kappa = params.kappa(ss_params.smoothing, ss_params.noise_scaler)?;
    let shift = standard_laplace_quantile(1.0 - params.failure);
    let z = standard_laplace(rng);
    let raw = inflated_threshold(quantile, ss, kappa, ss_params.noise_scaler, z, shift);
    let floor = config.grid.values(config.bound)?[0];
    Ok(ThresholdDecision {
        theta: clamp_threshold(raw, floor, config.bound),
        method: ThresholdMethod::SPak,
        epsilon,
        m: values.len(),
        trace: ThresholdTrace::SmoothSensitivity {
            quantile,
            rank: ss_params.rank,
            smooth_sensitivity: ss,
            noise_scaler: ss_params.noise_scaler,
            kappa,
            noise: z,
            unclamped: raw,
        },
    })
}

/// Plain smooth-sensitivity percentile (S-P): `x̂ + SS·Z/a`, clamped to `[grid min, B]`.
pub fn sp_threshold(
    values: &[f64],
    percentile: f64,
    delta: f64,
    config: &StreamConfig,
    rng: &mut RandomSource,
) -> Result<ThresholdDecision> {
    config.validate()?;
    let epsilon = config.threshold_budget();
    let (_, ss_params, quantile, ss) = smooth_quantile_setup(values, percentile, epsilon, delta, config.bound)?;
    let z = standard_laplace(rng);
    let raw = inflated_threshold(quantile, ss, 1.0, ss_params.noise_scaler, z, 0.0);
    let floor = config.grid.values(config.bound)?[0];
    Ok(ThresholdDecision {
        theta: clamp_threshold(raw, floor, config.bound),
        method: ThresholdMethod::SP,
        epsilon,
        m: values.len(),
        trace: ThresholdTrace::SmoothSensitivity {
            quantile,
            rank: ss_params.rank,
            smooth_sensitivity: ss,
            noise_scaler: ss_params.noise_scaler,
            kappa: 1.0,
            noise: z,
            unclamped: raw,
        },
    })
}
