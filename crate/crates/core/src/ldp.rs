//! Local-DP building blocks: Square Wave density estimation for choosing the
//! threshold, and stochastic rounding / piecewise / hybrid perturbation for
//! the stream itself.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math::{self, exp, expm1};
use crate::rng::RandomSource;
use crate::threshold::{ThresholdDecision, ThresholdMethod, ThresholdTrace};
use crate::{Error, Result};

pub const DENSITY_BINS: usize = 1024;
/// Below this cutoff, hybrid perturbation always uses stochastic rounding.
pub const HYBRID_CUTOFF: f64 = 0.61;
pub const PRUNE_LEVEL: f64 = 0.001;
pub const PRUNE_RUN: usize = 5;
/// Pruning is skipped when it would drop at least this share of the mass.
pub const PRUNE_GUARD: f64 = 0.99;

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0) || epsilon.is_nan() {
        return Err(Error::invalid("epsilon must be positive"));
    }
    Ok(())
}

/// Square Wave parameters over the unit input domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwParams {
    pub epsilon: f64,
    /// Half-width of the high-density band around the input.
    pub half_width: f64,
    /// Density inside the band.
    pub p: f64,
    /// Density outside the band.
    pub q: f64,
}

impl SwParams {
    pub fn new(epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        if !epsilon.is_finite() {
            return Err(Error::invalid("square wave needs a finite epsilon"));
        }
        let e = exp(epsilon);
        // e^ε − 1 − ε, kept accurate for small ε
        let gap = expm1(epsilon) - epsilon;
        let half_width = (epsilon * e - e + 1.0) / (2.0 * e * gap);
        let norm = 2.0 * half_width * e + 1.0;
        Ok(Self {
            epsilon,
            half_width,
            p: e / norm,
            q: 1.0 / norm,
        })
    }

    /// Lower end of the output domain.
    pub fn output_low(&self) -> f64 {
        -self.half_width
    }

    pub fn output_high(&self) -> f64 {
        1.0 + self.half_width
    }

    /// Probability that a report lands in the band.
    pub fn band_mass(&self) -> f64 {
        2.0 * self.half_width * self.p
    }
}

/// Map `v ∈ [lo, hi]` onto `[0, 1]`.
pub fn to_unit(v: f64, lo: f64, hi: f64) -> f64 {
    (v - lo) / (hi - lo)
}

pub fn sw_perturb(v: f64, params: &SwParams, rng: &mut RandomSource) -> Result<f64> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::invalid(alloc::format!("square wave input {v} outside [0, 1]")));
    }
    let b = params.half_width;
    if rng.bernoulli(params.band_mass()) {
        return Ok(rng.uniform_range(v - b, v + b));
    }
    // the out-of-band region has total length 1: [−b, v−b) ∪ (v+b, 1+b]
    let u = rng.uniform();
    Ok(if u < v { -b + u } else { v + b + (u - v) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub input_bins: usize,
    pub output_bins: usize,
    /// Stop when the relative log-likelihood gain falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            input_bins: DENSITY_BINS,
            output_bins: DENSITY_BINS,
            tolerance: 1e-6,
            max_iterations: 10_000,
        }
    }
}

/// Binned density over `[0, B]`. Bin `i` stands for the value `(i+1)·B/n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub bound: f64,
    pub frequencies: Vec<f64>,
    /// First zeroed bin after pruning.
    pub cutoff: Option<usize>,
    pub iterations: usize,
}

impl DensityEstimate {
    pub fn from_frequencies(bound: f64, frequencies: Vec<f64>) -> Result<Self> {
        if !(bound > 0.0) || frequencies.is_empty() {
            return Err(Error::invalid("density needs a positive bound and at least one bin"));
        }
        if frequencies.iter().any(|f| !(*f >= 0.0) || !f.is_finite()) {
            return Err(Error::invalid("frequencies must be finite and non-negative"));
        }
        Ok(Self {
            bound,
            frequencies,
            cutoff: None,
            iterations: 0,
        })
    }

    pub fn bins(&self) -> usize {
        self.frequencies.len()
    }

    /// Value represented by bin `i`.
    pub fn value(&self, i: usize) -> f64 {
        (i + 1) as f64 * self.bound / self.bins() as f64
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.bins()).map(|i| self.value(i)).collect()
    }

    pub fn total(&self) -> f64 {
        self.frequencies.iter().sum()
    }
}

// Report counts per output bin.
fn bin_reports(reports: &[f64], params: &SwParams, bins: usize) -> Result<Vec<f64>> {
    let lo = params.output_low();
    let width = (params.output_high() - lo) / bins as f64;
    let mut counts = vec![0.0; bins];
    for (index, &y) in reports.iter().enumerate() {
        if !y.is_finite() {
            return Err(Error::DataContract {
                index,
                reason: alloc::format!("report {y} is not finite"),
            });
        }
        let j = math::floor((y - lo) / width);
        let j = if j < 0.0 { 0 } else { (j as usize).min(bins - 1) };
        counts[j] += 1.0;
    }
    Ok(counts)
}

/// `P(z) = Σ f_i·(z − x_i)₊` over input-bin centres `x_i = (i + ½)/d`, via prefix sums.
struct RampSum<'a> {
    mass: &'a [f64],
    moment: &'a [f64],
}

impl RampSum<'_> {
    fn eval(&self, z: f64) -> f64 {
        let d = self.mass.len() - 1;
        let k = math::ceil(z * d as f64 - 0.5);
        let k = if k <= 0.0 { 0 } else { (k as usize).min(d) };
        z * self.mass[k] - self.moment[k]
    }
}

/// Expectation-maximisation for the input density behind Square Wave reports,
/// without a smoothing step. Returns a probability vector over `input_bins`
/// bins of `[0, bound]`.
pub fn sw_estimate(reports: &[f64], params: &SwParams, bound: f64, config: &EmConfig) -> Result<DensityEstimate> {
    if reports.is_empty() {
        return Err(Error::invalid("density estimation needs at least one report"));
    }
    if config.input_bins == 0 || config.output_bins == 0 {
        return Err(Error::invalid("bin counts must be positive"));
    }
    let d = config.input_bins;
    let n_out = config.output_bins;
    let counts = bin_reports(reports, params, n_out)?;
    let total = reports.len() as f64;
    let b = params.half_width;
    let lo = params.output_low();
    let w_out = (params.output_high() - lo) / n_out as f64;
    let diff = params.p - params.q;
    let centres: Vec<f64> = (0..d).map(|i| (i as f64 + 0.5) / d as f64).collect();

    let mut f = vec![1.0 / d as f64; d];
    let mut mass = vec![0.0; d + 1];
    let mut moment = vec![0.0; d + 1];
    let mut predicted = vec![0.0; n_out];
    let mut ratio_cdf = vec![0.0; n_out + 1];
    let mut prev_ll = f64::NEG_INFINITY;
    let mut iterations = 0;

    while iterations < config.max_iterations {
        iterations += 1;
        for i in 0..d {
            mass[i + 1] = mass[i] + f[i];
            moment[i + 1] = moment[i] + f[i] * centres[i];
        }
        let ramp = RampSum {
            mass: &mass,
            moment: &moment,
        };
        // Σ_i f_i·|[x_i − b, x_i + b] ∩ (−∞, o]| = P(o + b) − P(o − b)
        let band_below = |o: f64| ramp.eval(o + b) - ramp.eval(o - b);
        let mut ll = 0.0;
        let mut lower = band_below(lo);
        for j in 0..n_out {
            let upper = band_below(lo + (j + 1) as f64 * w_out);
            predicted[j] = params.q * w_out + diff * (upper - lower);
            lower = upper;
            if counts[j] > 0.0 {
                ll += counts[j] * math::ln(predicted[j]);
            }
        }

        // cumulative integral of the piecewise-constant ratio n_j / (N·Mf_j) over the output domain
        for j in 0..n_out {
            let c = if counts[j] > 0.0 { counts[j] / (total * predicted[j]) } else { 0.0 };
            ratio_cdf[j + 1] = ratio_cdf[j] + c * w_out;
        }
        let ratio_sum = ratio_cdf[n_out] / w_out;
        let integral = |y: f64| {
            let pos = ((y - lo) / w_out).clamp(0.0, n_out as f64);
            let k = (math::floor(pos) as usize).min(n_out - 1);
            let frac = pos - k as f64;
            ratio_cdf[k] + frac * (ratio_cdf[k + 1] - ratio_cdf[k])
        };
        let mut norm = 0.0;
        for i in 0..d {
            let x = centres[i];
            let back = params.q * w_out * ratio_sum + diff * (integral(x + b) - integral(x - b));
            f[i] *= back;
            norm += f[i];
        }
        if norm > 0.0 {
            for v in f.iter_mut() {
                *v /= norm;
            }
        }

        if prev_ll.is_finite() && (ll - prev_ll).abs() <= config.tolerance * ll.abs() {
            break;
        }
        prev_ll = ll;
    }

    Ok(DensityEstimate {
        bound,
        frequencies: f,
        cutoff: None,
        iterations,
    })
}

/// Zero everything from the first run of five sub-0.1% bins onward, then renormalise.
pub fn prune_density(est: &DensityEstimate) -> DensityEstimate {
    let f = &est.frequencies;
    let total = est.total();
    let mut out = est.clone();
    if f.len() < PRUNE_RUN || !(total > 0.0) {
        return out;
    }
    let Some(w) = (0..=f.len() - PRUNE_RUN).find(|&w| f[w..w + PRUNE_RUN].iter().all(|&x| x < PRUNE_LEVEL)) else {
        return out;
    };
    let removed: f64 = f[w..].iter().sum();
    if removed >= PRUNE_GUARD * total {
        return out;
    }
    let kept = total - removed;
    for (i, v) in out.frequencies.iter_mut().enumerate() {
        *v = if i >= w { 0.0 } else { *v / kept };
    }
    out.cutoff = Some(w);
    out
}

/// `((e^ε + 1)/(e^ε − 1))`, the stochastic-rounding output magnitude.
pub fn sr_scale(epsilon: f64) -> f64 {
    let em1 = expm1(epsilon);
    (em1 + 2.0) / em1
}

fn check_unit_interval(v: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&v) {
        return Err(Error::invalid(alloc::format!("input {v} outside [-1, 1]")));
    }
    Ok(())
}

/// Stochastic rounding followed by binary randomized response; unbiased for `v`.
pub fn sr_perturb(v: f64, epsilon: f64, rng: &mut RandomSource) -> Result<f64> {
    check_unit_interval(v)?;
    check_epsilon(epsilon)?;
    let up = rng.bernoulli(0.5 + v / 2.0);
    let keep = rng.bernoulli(1.0 / (1.0 + exp(-epsilon)));
    let scale = sr_scale(epsilon);
    Ok(if up == keep { scale } else { -scale })
}

pub fn sr_variance(v: f64, epsilon: f64) -> f64 {
    let k = sr_scale(epsilon);
    k * k - v * v
}

/// Output bound `s = (e^(ε/2) + 1)/(e^(ε/2) − 1)` of the piecewise mechanism.
pub fn pm_bound(epsilon: f64) -> f64 {
    let em1 = expm1(epsilon / 2.0);
    (em1 + 2.0) / em1
}

/// High-probability band `[ℓ(v), r(v)]`.
pub fn pm_band(v: f64, epsilon: f64) -> (f64, f64) {
    let t = exp(epsilon / 2.0);
    let em1 = expm1(epsilon / 2.0);
    ((t * v - 1.0) / em1, (t * v + 1.0) / em1)
}

pub fn pm_perturb(v: f64, epsilon: f64, rng: &mut RandomSource) -> Result<f64> {
    check_unit_interval(v)?;
    check_epsilon(epsilon)?;
    let t = exp(epsilon / 2.0);
    let s = pm_bound(epsilon);
    let (l, r) = pm_band(v, epsilon);
    if rng.bernoulli(t / (t + 1.0)) {
        return Ok(rng.uniform_range(l, r));
    }
    let left = l + s;
    let u = rng.uniform_range(0.0, left + (s - r));
    Ok(if u < left { -s + u } else { r + (u - left) })
}

pub fn pm_variance(v: f64, epsilon: f64) -> f64 {
    let t = exp(epsilon / 2.0);
    let em1 = expm1(epsilon / 2.0);
    v * v / em1 + (t + 3.0) / (3.0 * em1 * em1)
}

/// Probability of using the piecewise mechanism inside the hybrid.
pub fn hm_mix(epsilon: f64) -> f64 {
    if epsilon <= HYBRID_CUTOFF {
        0.0
    } else {
        -expm1(-epsilon / 2.0)
    }
}

pub fn hm_perturb(v: f64, epsilon: f64, rng: &mut RandomSource) -> Result<f64> {
    check_unit_interval(v)?;
    check_epsilon(epsilon)?;
    let alpha = hm_mix(epsilon);
    if alpha > 0.0 && rng.bernoulli(alpha) {
        pm_perturb(v, epsilon, rng)
    } else {
        sr_perturb(v, epsilon, rng)
    }
}

/// Worst-case hybrid variance, two branches split at `ε = 0.61`.
pub fn hm_worst_case_variance(epsilon: f64) -> f64 {
    let k = sr_scale(epsilon);
    if epsilon <= HYBRID_CUTOFF {
        k * k
    } else {
        let t = exp(epsilon / 2.0);
        (k * k + (t + 3.0) / (3.0 * expm1(epsilon / 2.0))) / t
    }
}

/// Exact hybrid variance at input `v`.
pub fn hm_variance(v: f64, epsilon: f64) -> f64 {
    let alpha = hm_mix(epsilon);
    alpha * pm_variance(v, epsilon) + (1.0 - alpha) * sr_variance(v, epsilon)
}

/// Client side: truncated `x ∈ [0, θ]` to a hybrid report on `[−1, 1]`'s scale.
pub fn encode_reading(x: f64, theta: f64, epsilon: f64, rng: &mut RandomSource) -> Result<f64> {
    if !(theta > 0.0) || !(0.0..=theta).contains(&x) {
        return Err(Error::invalid(alloc::format!("reading {x} outside [0, θ = {theta}]")));
    }
    let v = (2.0 * x / theta - 1.0).clamp(-1.0, 1.0);
    hm_perturb(v, epsilon, rng)
}

/// Server side: unbiased estimate of the truncated reading.
pub fn decode_report(y: f64, theta: f64) -> f64 {
    (y + 1.0) * theta / 2.0
}

/// Range-query error model for candidate threshold `θ`:
/// `(r/3)·(θ/2)²·Var_HM(ε) + (r²/24)·(Σ_{t>θ} f_t·(t − θ))²`.
pub fn ldp_error_model(est: &DensityEstimate, theta: f64, epsilon: f64, range: u64) -> f64 {
    let r = range as f64;
    let half = theta / 2.0;
    let variance = half * half * hm_worst_case_variance(epsilon);
    let mut bias = 0.0;
    for (i, &f) in est.frequencies.iter().enumerate() {
        let t = est.value(i);
        if t > theta {
            bias += f * (t - theta);
        }
    }
    r / 3.0 * variance + r * r / 24.0 * bias * bias
}

/// Grid threshold minimising [`ldp_error_model`]; the grid is the density's bin values.
pub fn ldp_threshold(est: &DensityEstimate, epsilon: f64, range: u64, m: usize) -> Result<ThresholdDecision> {
    if !(est.total() > 0.0) {
        return Err(Error::invalid("density estimate carries no mass"));
    }
    check_epsilon(epsilon)?;
    let candidates = est.values();
    // tail sums in one backward pass: Σ_{k>i} f_k and Σ_{k>i} f_k·t_k
    let n = candidates.len();
    let mut tail_mass = vec![0.0; n + 1];
    let mut tail_moment = vec![0.0; n + 1];
    for i in (0..n).rev() {
        tail_mass[i] = tail_mass[i + 1] + est.frequencies[i];
        tail_moment[i] = tail_moment[i + 1] + est.frequencies[i] * candidates[i];
    }
    let r = range as f64;
    let var_unit = hm_worst_case_variance(epsilon);
    let costs: Vec<f64> = candidates
        .iter()
        .enumerate()
        .map(|(i, &theta)| {
            let bias = (tail_moment[i + 1] - theta * tail_mass[i + 1]).max(0.0);
            r / 3.0 * (theta / 2.0) * (theta / 2.0) * var_unit + r * r / 24.0 * bias * bias
        })
        .collect();
    let mut best = 0;
    for (i, &c) in costs.iter().enumerate() {
        if c < costs[best] {
            best = i;
        }
    }
    Ok(ThresholdDecision {
        theta: candidates[best],
        method: ThresholdMethod::SwW,
        epsilon,
        m,
        trace: ThresholdTrace::Scores {
            candidates,
            scores: costs,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_wave_closed_form_at_one() {
        let p = SwParams::new(1.0).unwrap();
        let e = core::f64::consts::E;
        assert!((p.half_width - 1.0 / (2.0 * e * (e - 2.0))).abs() < 1e-12);
        assert!((p.half_width - 0.2561).abs() < 1e-4);
        assert!((p.p - 1.1363).abs() < 1e-4);
        assert!((p.q - 0.4180).abs() < 1e-4);
    }

    #[test]
    fn square_wave_mass_identity() {
        for eps in [0.1, 0.5, 1.0, 2.0, 4.0] {
            let p = SwParams::new(eps).unwrap();
            assert!((p.band_mass() + p.q - 1.0).abs() < 1e-12, "{eps}");
            assert!((p.p / p.q - exp(eps)).abs() < 1e-12 * exp(eps));
        }
    }

    #[test]
    fn square_wave_rejects_out_of_domain() {
        let p = SwParams::new(1.0).unwrap();
        let mut rng = RandomSource::new(1, 1);
        assert!(sw_perturb(1.1, &p, &mut rng).is_err());
        let y = sw_perturb(0.3, &p, &mut rng).unwrap();
        assert!(y >= p.output_low() && y <= p.output_high());
    }

    #[test]
    fn ramp_sum_matches_direct() {
        let f = [0.1, 0.4, 0.2, 0.3];
        let x: Vec<f64> = (0..4).map(|i| (i as f64 + 0.5) / 4.0).collect();
        let mut mass = vec![0.0; 5];
        let mut moment = vec![0.0; 5];
        for i in 0..4 {
            mass[i + 1] = mass[i] + f[i];
            moment[i + 1] = moment[i] + f[i] * x[i];
        }
        let ramp = RampSum { mass: &mass, moment: &moment };
        for z in [-0.5, 0.0, 0.125, 0.2, 0.5, 0.9, 1.3] {
            let want: f64 = f.iter().zip(&x).map(|(fi, xi)| fi * (z - xi).max(0.0)).sum();
            assert!((ramp.eval(z) - want).abs() < 1e-12, "{z}");
        }
    }

    #[test]
    fn single_report_gives_probability_vector() {
        let p = SwParams::new(1.0).unwrap();
        let est = sw_estimate(&[0.4], &p, 1.0, &EmConfig::default()).unwrap();
        assert!(est.frequencies.iter().all(|&f| f >= 0.0));
        assert!((est.total() - 1.0).abs() < 1e-9);
        assert!(sw_estimate(&[], &p, 1.0, &EmConfig::default()).is_err());
    }

    #[test]
    fn prune_rules() {
        let mut f = vec![0.0; 200];
        for (i, v) in f.iter_mut().enumerate().take(100) {
            *v = if i % 2 == 0 { 0.015 } else { 0.005 };
        }
        f[150] = 0.0005;
        let est = DensityEstimate::from_frequencies(1.0, f).unwrap();
        let pruned = prune_density(&est);
        assert_eq!(pruned.cutoff, Some(100));
        assert!(pruned.frequencies[100..].iter().all(|&x| x == 0.0));
        assert!((pruned.total() - 1.0).abs() < 1e-12);

        let uniform = DensityEstimate::from_frequencies(1.0, vec![1.0 / 1024.0; 1024]).unwrap();
        assert_eq!(prune_density(&uniform), uniform);

        let dense = DensityEstimate::from_frequencies(1.0, vec![0.1; 10]).unwrap();
        assert_eq!(prune_density(&dense), dense);
    }

    #[test]
    fn piecewise_closed_form() {
        let eps = 2.0 * libm::log(3.0);
        assert!((pm_bound(eps) - 2.0).abs() < 1e-12);
        let (l, r) = pm_band(0.0, eps);
        assert!((l + 0.5).abs() < 1e-12 && (r - 0.5).abs() < 1e-12);
        // densities 3/4 in band and 1/12 outside
        let s = pm_bound(eps);
        let t: f64 = 3.0;
        let z = (t - 1.0) / (t + 1.0);
        assert!((t / 2.0 * z - 0.75).abs() < 1e-12);
        assert!((z / (2.0 * t) - 1.0 / 12.0).abs() < 1e-12);
        let total = 0.75 * (r - l) + (1.0 / 12.0) * (2.0 * s - (r - l));
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hybrid_variance_branches() {
        let e = exp(0.5);
        assert!((hm_worst_case_variance(0.5) - ((e + 1.0) / (e - 1.0)).powi(2)).abs() < 1e-12);
        assert!((hm_worst_case_variance(0.5) - 16.67).abs() < 0.01);
        assert_eq!(hm_mix(0.5), 0.0);
        assert!((hm_mix(2.0) - (1.0 - exp(-1.0))).abs() < 1e-15);
        // above the cutoff the hybrid variance does not depend on v
        for eps in [0.7, 1.0, 2.0, 5.0] {
            for v in [-1.0, -0.3, 0.0, 0.8] {
                assert!((hm_variance(v, eps) - hm_worst_case_variance(eps)).abs() < 1e-9 * hm_worst_case_variance(eps));
            }
        }
        assert!(hm_worst_case_variance(60.0) < 1e-6);
    }

    #[test]
    fn threshold_point_mass() {
        let mut f = vec![0.0; 1024];
        f[99] = 1.0;
        let est = DensityEstimate::from_frequencies(1024.0, f).unwrap();
        // with a realistic range limit the squared bias dominates
        let d = ldp_threshold(&est, 1.0, 1 << 20, 10).unwrap();
        assert_eq!(d.theta, 100.0);
        assert_eq!(d.method, ThresholdMethod::SwW);
    }

    #[test]
    fn threshold_matches_direct_model() {
        let mut f = vec![0.0; 1024];
        f[0] = 0.9;
        f[9] = 0.1;
        let est = DensityEstimate::from_frequencies(1024.0, f).unwrap();
        let d = ldp_threshold(&est, 1.0, 100, 10).unwrap();
        let ThresholdTrace::Scores { candidates, scores } = &d.trace else { panic!() };
        for (c, s) in candidates.iter().zip(scores).take(20) {
            let direct = ldp_error_model(&est, *c, 1.0, 100);
            assert!((s - direct).abs() <= 1e-9 * direct.abs());
        }
        assert!(ldp_threshold(&DensityEstimate::from_frequencies(1.0, vec![0.0; 8]).unwrap(), 1.0, 10, 1).is_err());
    }

    #[test]
    fn decode_inverts_encoding_scale() {
        assert_eq!(decode_report(-1.0, 10.0), 0.0);
        assert_eq!(decode_report(1.0, 10.0), 10.0);
        let mut rng = RandomSource::new(2, 2);
        assert!(encode_reading(11.0, 10.0, 1.0, &mut rng).is_err());
    }
}
