//! Central-model primitives: Laplace noise, the exponential mechanism and the
//! smooth sensitivity of an empirical quantile.

use alloc::vec::Vec;

use crate::math;
use crate::rng::RandomSource;
use crate::{Error, Result};

/// Scale of a zero-mean Laplace distribution, `β = Δf / ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplaceParams {
    scale: f64,
}

impl LaplaceParams {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid("laplace scale must be positive and finite"));
        }
        Ok(Self { scale })
    }

    /// Scale for releasing a function of global sensitivity `sensitivity` at budget `epsilon`.
    pub fn for_sensitivity(sensitivity: f64, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        Self::new(sensitivity / epsilon)
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn variance(&self) -> f64 {
        2.0 * self.scale * self.scale
    }
}

/// One draw from `Lap(β)` by inverting the CDF of a single uniform.
pub fn laplace_sample(params: LaplaceParams, rng: &mut RandomSource) -> f64 {
    params.scale * standard_laplace(rng)
}

/// A `Lap(1)` draw.
pub fn standard_laplace(rng: &mut RandomSource) -> f64 {
    let u = rng.uniform_open() - 0.5;
    let mag = -math::ln1p(-2.0 * math::abs(u));
    if u < 0.0 {
        -mag
    } else {
        mag
    }
}

/// CDF of `Lap(1)`.
pub fn standard_laplace_cdf(x: f64) -> f64 {
    if x < 0.0 {
        0.5 * math::exp(x)
    } else {
        1.0 - 0.5 * math::exp(-x)
    }
}

/// Inverse CDF of `Lap(1)`; `p` in `(0, 1)`.
pub fn standard_laplace_quantile(p: f64) -> f64 {
    if p < 0.5 {
        math::ln(2.0 * p)
    } else {
        -math::ln(2.0 * (1.0 - p))
    }
}

/// Scored candidates for the exponential mechanism.
#[derive(Debug, Clone, PartialEq)]
pub struct EmCandidateSet<T> {
    candidates: Vec<T>,
    scores: Vec<f64>,
    sensitivity: f64,
    monotone: bool,
}

impl<T> EmCandidateSet<T> {
    pub fn new(candidates: Vec<T>, scores: Vec<f64>, sensitivity: f64, monotone: bool) -> Result<Self> {
        if candidates.len() != scores.len() {
            return Err(Error::LengthMismatch {
                expected: candidates.len(),
                actual: scores.len(),
            });
        }
        if !(sensitivity > 0.0) {
            return Err(Error::invalid("quality sensitivity must be positive"));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::invalid("quality score is NaN"));
        }
        Ok(Self {
            candidates,
            scores,
            sensitivity,
            monotone,
        })
    }

    pub fn candidates(&self) -> &[T] {
        &self.candidates
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Exponent multiplier `ε / (κ·GS_q)`, `κ = 1` for monotone quality functions and 2 otherwise.
    fn exponent_scale(&self, epsilon: f64) -> f64 {
        let kappa = if self.monotone { 1.0 } else { 2.0 };
        epsilon / (kappa * self.sensitivity)
    }

    /// Selection probabilities, normalized in log space.
    pub fn probabilities(&self, epsilon: f64) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Err(Error::invalid("empty candidate set"));
        }
        if !(epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        let weights = self.relative_weights(epsilon);
        let total: f64 = weights.iter().sum();
        Ok(weights.into_iter().map(|w| w / total).collect())
    }

    // exp(logit - max logit); the maximum entry is exactly 1 so the sum never overflows
    fn relative_weights(&self, epsilon: f64) -> Vec<f64> {
        let scale = self.exponent_scale(epsilon);
        let max = self
            .scores
            .iter()
            .map(|&s| s * scale)
            .fold(f64::NEG_INFINITY, f64::max);
        self.scores
            .iter()
            .map(|&s| {
                let z = s * scale - max;
                if z.is_nan() {
                    // both infinite: happens only when epsilon is infinite
                    1.0
                } else {
                    math::exp(z)
                }
            })
            .collect()
    }
}

/// Sample a candidate index with probability proportional to `exp(ε·q / (κ·GS_q))`.
pub fn exp_mechanism<T>(set: &EmCandidateSet<T>, epsilon: f64, rng: &mut RandomSource) -> Result<usize> {
    if set.is_empty() {
        return Err(Error::invalid("empty candidate set"));
    }
    if !(epsilon > 0.0) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let weights = set.relative_weights(epsilon);
    let total: f64 = weights.iter().sum();
    let target = rng.uniform() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return Ok(i);
        }
    }
    // rounding left target == total; fall back to the last positive weight
    Ok(weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1))
}

/// Noise family used with smooth sensitivity. Only the Laplace `(ε, δ)` variant is provided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SmoothNoise {
    Laplace,
}

/// Parameters for releasing an empirical quantile with smooth sensitivity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothSensParams {
    /// 1-based rank of the released order statistic.
    pub rank: usize,
    /// Smoothing parameter `b`.
    pub smoothing: f64,
    /// Noise scaler `a`.
    pub noise_scaler: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub noise: SmoothNoise,
}

impl SmoothSensParams {
    /// Laplace instantiation: `a = ε/2`, `b = ε / (-2 ln δ)`.
    pub fn laplace(epsilon: f64, delta: f64, rank: usize) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::invalid("delta must lie in (0, 1)"));
        }
        Ok(Self {
            rank,
            smoothing: epsilon / (-2.0 * math::ln(delta)),
            noise_scaler: epsilon / 2.0,
            epsilon,
            delta,
            noise: SmoothNoise::Laplace,
        })
    }

    fn validate(&self, m: usize) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid("delta must lie in (0, 1)"));
        }
        if !(self.smoothing > 0.0) {
            return Err(Error::invalid("smoothing parameter must be positive"));
        }
        if !(self.noise_scaler > 0.0) {
            return Err(Error::invalid("noise scaler must be positive"));
        }
        let limit = self.epsilon / (-2.0 * math::ln(self.delta));
        if self.smoothing > limit * (1.0 + 1e-12) {
            return Err(Error::invalid("smoothing parameter exceeds eps / (-2 ln delta)"));
        }
        if self.rank < 1 || self.rank > m {
            return Err(Error::invalid("quantile rank outside [1, m]"));
        }
        Ok(())
    }
}

/// 1-based rank of the empirical `pct`-th percentile among `m` values.
pub fn quantile_rank(pct: f64, m: usize) -> usize {
    let r = math::ceil(pct / 100.0 * m as f64) as usize;
    r.clamp(1, m.max(1))
}

/// Smooth sensitivity of the empirical quantile at `params.rank`.
///
/// Evaluates `max_k e^{-b k} max_{t ≤ k+1} [V(P+t) − V(P+t−k−1)]` over `k = 0..=m+1`,
/// where `V` is the sorted data padded with `0` below index 1 and `bound` above `m`.
/// The outer loop stops once `e^{-b k}·bound` cannot beat the running maximum.
pub fn smooth_sensitivity_quantile(sorted_values: &[f64], params: &SmoothSensParams, bound: f64) -> Result<f64> {
    let m = sorted_values.len();
    if m == 0 {
        return Err(Error::invalid("empty data"));
    }
    if sorted_values.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::invalid("values must be sorted ascending"));
    }
    if sorted_values[0] < 0.0 || sorted_values[m - 1] > bound {
        return Err(Error::invalid("values must lie in [0, B]"));
    }
    params.validate(m)?;

    let padded = |i: i64| -> f64 {
        if i < 1 {
            0.0
        } else if i as usize > m {
            bound
        } else {
            sorted_values[i as usize - 1]
        }
    };

    let p = params.rank as i64;
    let mut best = 0.0f64;
    for k in 0..=(m as i64 + 1) {
        let weight = if k == 0 {
            1.0
        } else {
            math::exp(-params.smoothing * k as f64)
        };
        if weight * bound <= best {
            break;
        }
        let mut widest = 0.0f64;
        for t in 0..=(k + 1) {
            let gap = padded(p + t) - padded(p + t - k - 1);
            if gap > widest {
                widest = gap;
            }
        }
        best = best.max(weight * widest);
    }
    Ok(best)
}
