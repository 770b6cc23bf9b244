//! Level selection and per-reading prediction from group aggregates.
//!
//! The perturber releases one noisy aggregate `u_t` per group of `b^s`
//! readings. The smoother turns the sequence `u_0, u_1, …, u_t` (with the
//! prior `u_0 = b^s·θ/2`) into one estimate per reading.

use alloc::collections::{BinaryHeap, VecDeque};
use core::cmp::{Ordering, Reverse};

use serde::{Deserialize, Serialize};

use crate::math;
use crate::{Error, Result};

pub const DEFAULT_WINDOW: usize = 4;
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SmootherKind {
    #[default]
    Recent,
    Mean,
    Median,
    MovingAverage {
        #[serde(default = "default_window", alias = "w")]
        window: usize,
    },
    Exponential {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
}

fn default_window() -> usize {
    DEFAULT_WINDOW
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

impl SmootherKind {
    pub fn moving_average() -> Self {
        SmootherKind::MovingAverage { window: DEFAULT_WINDOW }
    }

    pub fn exponential() -> Self {
        SmootherKind::Exponential { alpha: DEFAULT_ALPHA }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SmootherKind::Recent => "recent",
            SmootherKind::Mean => "mean",
            SmootherKind::Median => "median",
            SmootherKind::MovingAverage { .. } => "moving_average",
            SmootherKind::Exponential { .. } => "exponential",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SmootherKind::MovingAverage { window } if window == 0 => Err(Error::invalid("moving-average window must be at least 1")),
            SmootherKind::Exponential { alpha } if !(0.0..=1.0).contains(&alpha) => {
                Err(Error::invalid("exponential smoothing parameter must lie in [0, 1]"))
            }
            _ => Ok(()),
        }
    }
}

/// Squared-error model for `s` smoothed levels:
/// `(b−1)(log_b r − s)³·2θ²/ε² + (b^s/2)·θ²/4`.
pub fn smoothing_error_model(theta: f64, epsilon: f64, range: u64, fanout: u32, s: u32) -> f64 {
    let t2 = theta * theta;
    t2 * model_unit(epsilon, range, fanout, s)
}

// The model divided by θ²; θ only scales it, so the argmin is taken here.
fn model_unit(epsilon: f64, range: u64, fanout: u32, s: u32) -> f64 {
    let b = fanout as f64;
    let depth = log_base(range, fanout) - s as f64;
    (b - 1.0) * depth * depth * depth * 2.0 / (epsilon * epsilon) + math::powi(b, s) / 8.0
}

fn log_base(range: u64, fanout: u32) -> f64 {
    let h = math::ceil_log(fanout as u64, range);
    if math::upow(fanout as u64, h) == range {
        h as f64
    } else {
        math::ln(range as f64) / math::ln(fanout as f64)
    }
}

/// Number of bottom levels to replace by prediction, by exhaustive search over
/// `0..h`; ties go to the smaller `s`.
pub fn optimize_s(theta: f64, epsilon: f64, range: u64, fanout: u32) -> Result<u32> {
    if !(theta > 0.0) || !(epsilon > 0.0) {
        return Err(Error::invalid("threshold and epsilon must be positive"));
    }
    if fanout < 2 || range < fanout as u64 {
        return Err(Error::invalid("need b >= 2 and r >= b"));
    }
    let h = math::ceil_log(fanout as u64, range);
    let mut best = 0;
    let mut best_cost = f64::INFINITY;
    for s in 0..h {
        let cost = model_unit(epsilon, range, fanout, s);
        if cost < best_cost {
            best = s;
            best_cost = cost;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ordered(f64);

impl Eq for Ordered {}

impl PartialOrd for Ordered {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ordered {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Streaming median: max-heap of the lower half, min-heap of the upper half.
#[derive(Debug, Clone, Default)]
struct RunningMedian {
    low: BinaryHeap<Ordered>,
    high: BinaryHeap<Reverse<Ordered>>,
}

impl RunningMedian {
    fn push(&mut self, x: f64) {
        match self.low.peek() {
            Some(top) if x > top.0 => self.high.push(Reverse(Ordered(x))),
            _ => self.low.push(Ordered(x)),
        }
        if self.low.len() > self.high.len() + 1 {
            let v = self.low.pop().map(|o| o.0).unwrap_or_default();
            self.high.push(Reverse(Ordered(v)));
        } else if self.high.len() > self.low.len() {
            let v = self.high.pop().map(|r| r.0 .0).unwrap_or_default();
            self.low.push(Ordered(v));
        }
    }

    fn median(&self) -> Option<f64> {
        let lo = self.low.peek()?.0;
        if self.low.len() > self.high.len() {
            Some(lo)
        } else {
            self.high.peek().map(|r| 0.5 * (lo + r.0 .0))
        }
    }
}

#[derive(Debug, Clone)]
pub struct SmootherState {
    kind: SmootherKind,
    group_size: u64,
    prior: f64,
    received: u64,
    latest: f64,
    sum: f64,
    window: VecDeque<f64>,
    median: RunningMedian,
    last: f64,
}

impl SmootherState {
    /// State for groups of `group_size` readings and threshold `theta`.
    pub fn new(kind: SmootherKind, group_size: u64, theta: f64) -> Result<Self> {
        kind.validate()?;
        if group_size == 0 {
            return Err(Error::invalid("group size must be at least 1"));
        }
        let prior = group_size as f64 * theta / 2.0;
        let mut state = Self {
            kind,
            group_size,
            prior,
            received: 0,
            latest: prior,
            sum: prior,
            window: VecDeque::new(),
            median: RunningMedian::default(),
            last: prior / group_size as f64,
        };
        state.push_window(prior);
        Ok(state)
    }

    pub fn kind(&self) -> SmootherKind {
        self.kind
    }

    pub fn group_size(&self) -> u64 {
        self.group_size
    }

    /// `u_0 = b^s·θ/2`.
    pub fn prior(&self) -> f64 {
        self.prior
    }

    /// `t`, the number of aggregates received so far.
    pub fn received(&self) -> u64 {
        self.received
    }

    fn push_window(&mut self, u: f64) {
        if let SmootherKind::MovingAverage { window } = self.kind {
            self.window.push_back(u);
            if self.window.len() > window {
                self.window.pop_front();
            }
        }
    }

    /// Record aggregate `u_t`.
    pub fn push(&mut self, u: f64) {
        self.received += 1;
        self.latest = u;
        self.sum += u;
        self.push_window(u);
        if self.kind == SmootherKind::Median {
            self.median.push(u);
        }
        if let SmootherKind::Exponential { alpha } = self.kind {
            self.last = alpha * u / self.group_size as f64 + (1.0 - alpha) * self.last;
        }
    }

    /// Per-reading estimate from `u_0..u_t`.
    pub fn estimate(&self) -> f64 {
        let g = self.group_size as f64;
        let t = self.received;
        if t == 0 {
            return self.prior / g;
        }
        match self.kind {
            SmootherKind::Recent => self.latest / g,
            SmootherKind::Mean => self.sum / (g * t as f64),
            SmootherKind::Median => self.median.median().unwrap_or(self.prior) / g,
            SmootherKind::MovingAverage { .. } => self.window.iter().sum::<f64>() / (g * self.window.len() as f64),
            SmootherKind::Exponential { .. } => self.last,
        }
    }

    /// Advance by one reading: record `u` when a group boundary was crossed, then estimate.
    pub fn next(&mut self, maybe_u: Option<f64>) -> f64 {
        if let Some(u) = maybe_u {
            self.push(u);
        }
        self.estimate()
    }
}
