//! Synthetic streams, random range-query workloads and squared-error scoring.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::rng::{streams, RandomSource};
use crate::{Error, Result};

pub const DEFAULT_QUERY_COUNT: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticSpec {
    Constant { value: f64 },
    Uniform { low: f64, high: f64 },
    /// `body_mass` of the readings uniform on `[0, body_max]`, the rest uniform on `(body_max, tail_max]`.
    HeavyTail { body_mass: f64, body_max: f64, tail_max: f64 },
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            SyntheticSpec::Constant { value } => value.is_finite() && value >= 0.0,
            SyntheticSpec::Uniform { low, high } => low.is_finite() && high.is_finite() && 0.0 <= low && low <= high,
            SyntheticSpec::HeavyTail {
                body_mass,
                body_max,
                tail_max,
            } => (0.0..=1.0).contains(&body_mass) && body_max > 0.0 && tail_max > body_max && tail_max.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(alloc::format!("invalid synthetic spec {self:?}")))
        }
    }

    /// Smallest bound that covers every generated value.
    pub fn upper_bound(&self) -> f64 {
        match *self {
            SyntheticSpec::Constant { value } => value,
            SyntheticSpec::Uniform { high, .. } => high,
            SyntheticSpec::HeavyTail { tail_max, .. } => tail_max,
        }
    }
}

/// Deterministic stream of `n` readings for `(spec, seed)`.
pub fn gen_synthetic(spec: &SyntheticSpec, n: usize, seed: u64) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut rng = RandomSource::new(seed, streams::SYNTHETIC);
    Ok((0..n).map(|_| draw(spec, &mut rng)).collect())
}

fn draw(spec: &SyntheticSpec, rng: &mut RandomSource) -> f64 {
    match *spec {
        SyntheticSpec::Constant { value } => value,
        SyntheticSpec::Uniform { low, high } => rng.uniform_range(low, high),
        SyntheticSpec::HeavyTail {
            body_mass,
            body_max,
            tail_max,
        } => {
            if rng.bernoulli(body_mass) {
                rng.uniform_range(0.0, body_max)
            } else {
                // (body_max, tail_max]
                tail_max - (tail_max - body_max) * rng.uniform()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Length uniform on `1..=min(r, n)`, then start uniform among valid positions.
    #[default]
    LengthThenStart,
    /// `(i, j)` uniform over all ordered pairs with `j − i + 1 ≤ r`.
    UniformPair,
}

/// Range queries as 1-based inclusive `(i, j)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryWorkload {
    pub queries: Vec<(usize, usize)>,
    pub range: u64,
    pub seed: u64,
    pub mode: QueryMode,
}

impl QueryWorkload {
    pub fn mean_length(&self) -> f64 {
        if self.queries.is_empty() {
            return 0.0;
        }
        self.queries.iter().map(|(i, j)| (j - i + 1) as f64).sum::<f64>() / self.queries.len() as f64
    }
}

pub fn gen_queries(n: usize, range: u64, count: usize, seed: u64, mode: QueryMode) -> Result<QueryWorkload> {
    let mut rng = RandomSource::new(seed, streams::WORKLOAD);
    let mut w = gen_queries_from(n, range, count, mode, &mut rng)?;
    w.seed = seed;
    Ok(w)
}

/// As [`gen_queries`], drawing from a caller-supplied generator.
pub fn gen_queries_from(n: usize, range: u64, count: usize, mode: QueryMode, rng: &mut RandomSource) -> Result<QueryWorkload> {
    if n == 0 {
        return Err(Error::invalid("query workload needs a non-empty stream"));
    }
    if range == 0 {
        return Err(Error::invalid("range limit must be positive"));
    }
    let max_len = (range.min(n as u64)) as usize;
    let mut queries = Vec::with_capacity(count);
    for _ in 0..count {
        let q = match mode {
            QueryMode::LengthThenStart => {
                let len = 1 + rng.below(max_len as u64) as usize;
                let start = 1 + rng.below((n - len + 1) as u64) as usize;
                (start, start + len - 1)
            }
            QueryMode::UniformPair => loop {
                let a = 1 + rng.below(n as u64) as usize;
                let b = 1 + rng.below(n as u64) as usize;
                let (i, j) = if a <= b { (a, b) } else { (b, a) };
                if j - i + 1 <= max_len {
                    break (i, j);
                }
            },
        };
        queries.push(q);
    }
    Ok(QueryWorkload {
        queries,
        range,
        seed: rng.seed(),
        mode,
    })
}

/// Squared errors of one workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub squared_errors: Vec<f64>,
    pub mse: f64,
}

impl MseReport {
    fn from_errors(squared_errors: Vec<f64>) -> Self {
        let mse = if squared_errors.is_empty() {
            0.0
        } else {
            squared_errors.iter().sum::<f64>() / squared_errors.len() as f64
        };
        Self { squared_errors, mse }
    }
}

/// Left-to-right sum of `values[i-1..j]`.
pub fn range_sum(values: &[f64], i: usize, j: usize) -> f64 {
    values[i - 1..j].iter().sum()
}

fn check_query(n: usize, i: usize, j: usize) -> Result<()> {
    if i == 0 || i > j || j > n {
        return Err(Error::InvalidQuery {
            start: i,
            end: j,
            reason: alloc::format!("outside 1..={n}"),
        });
    }
    Ok(())
}

/// `(1/|Q|)·Σ (Ṽ(i,j) − V(i,j))²` with both sums taken over the streams directly.
pub fn evaluate(truth: &[f64], published: &[f64], workload: &QueryWorkload) -> Result<MseReport> {
    if truth.len() != published.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            actual: published.len(),
        });
    }
    evaluate_with(truth, workload, |i, j| Ok(range_sum(published, i, j)))
}

/// Score an arbitrary range-query answerer against the truth.
pub fn evaluate_with<F>(truth: &[f64], workload: &QueryWorkload, mut answer: F) -> Result<MseReport>
where
    F: FnMut(usize, usize) -> Result<f64>,
{
    let mut errors = Vec::with_capacity(workload.queries.len());
    for &(i, j) in &workload.queries {
        check_query(truth.len(), i, j)?;
        let d = answer(i, j)? - range_sum(truth, i, j);
        errors.push(d * d);
    }
    Ok(MseReport::from_errors(errors))
}

/// Mean and sample standard deviation over repetitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary {
            mean: f64::NAN,
            std: f64::NAN,
            count: 0,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        math::sqrt(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64)
    } else {
        0.0
    };
    Summary { mean, std, count: n }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    math::percentile_sorted(&v, 50.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetProfile {
    pub n: usize,
    pub max: f64,
    pub mean: f64,
    pub p85: f64,
    pub p95: f64,
    pub p995: f64,
}

impl DatasetProfile {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("cannot profile an empty stream"));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            n: values.len(),
            max: sorted[sorted.len() - 1],
            mean: values.iter().sum::<f64>() / values.len() as f64,
            p85: math::percentile_sorted(&sorted, 85.0),
            p95: math::percentile_sorted(&sorted, 95.0),
            p995: math::percentile_sorted(&sorted, 99.5),
        })
    }
}

pub fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    math::percentile_sorted(&v, pct)
}
