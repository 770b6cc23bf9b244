use statrs::distribution::{ChiSquared, ContinuousCDF};

use tops_core::mechanisms::{exp_mechanism, laplace_sample, EmCandidateSet, LaplaceParams};
use tops_core::threshold::{
    em_threshold, pak_threshold, quality_scores, sp_threshold, CandidateGrid, PakParams, StreamConfig, ThresholdMethod,
    ThresholdTrace,
};
use tops_core::workload::{gen_synthetic, SyntheticSpec};
use tops_core::RandomSource;

#[test]
fn laplace_variance_within_three_percent() {
    let params = LaplaceParams::new(2.0).unwrap();
    let mut rng = RandomSource::new(11, 0);
    let n = 1_000_000;
    let draws: Vec<f64> = (0..n).map(|_| laplace_sample(params, &mut rng)).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((var / 8.0 - 1.0).abs() < 0.03, "{var}");
}

fn chi_square_p_value(counts: &[u64], probs: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let dof = (counts.len() - 1) as f64;
    1.0 - ChiSquared::new(dof).unwrap().cdf(stat)
}

#[test]
fn exponential_mechanism_matches_closed_form() {
    let scores = vec![0.0, -1.0, -2.5, 0.5, -0.25, -4.0, 1.0, -1.5];
    for monotone in [true, false] {
        for eps in [0.5, 1.0, 2.0] {
            let set = EmCandidateSet::new((0..scores.len()).collect::<Vec<_>>(), scores.clone(), 1.0, monotone).unwrap();
            let kappa = if monotone { 1.0 } else { 2.0 };
            let weights: Vec<f64> = scores.iter().map(|s| (eps * s / kappa).exp()).collect();
            let total: f64 = weights.iter().sum();
            let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
            let mut rng = RandomSource::new(3, (eps * 10.0) as u64 + monotone as u64);
            let mut counts = vec![0u64; scores.len()];
            for _ in 0..100_000 {
                counts[exp_mechanism(&set, eps, &mut rng).unwrap()] += 1;
            }
            let p = chi_square_p_value(&counts, &probs);
            assert!(p > 0.001, "monotone={monotone} eps={eps} p={p}");
        }
    }
}

fn small_config(bound: f64) -> StreamConfig {
    StreamConfig::new(bound, 1.0, 5).with_range(1 << 10).with_fanout(4)
}

// All multisets of `len` values from 0..=max, in non-decreasing order.
fn multisets(len: usize, max: u32) -> Vec<Vec<u32>> {
    if len == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in multisets(len - 1, max) {
        let lo = rest.last().copied().unwrap_or(0);
        for v in lo..=max {
            let mut next = rest.clone();
            next.push(v);
            out.push(next);
        }
    }
    out
}

#[test]
fn quality_sensitivity_exhaustive() {
    for bound in [3u32, 6, 10] {
        let config = small_config(bound as f64);
        for len in 1..=5 {
            for base in multisets(len, bound) {
                let values: Vec<f64> = base.iter().map(|&v| v as f64).collect();
                let (_, q) = quality_scores(&values, &config).unwrap();
                for pos in 0..len {
                    for replacement in 0..=bound {
                        let mut other = values.clone();
                        other[pos] = replacement as f64;
                        let (_, q2) = quality_scores(&other, &config).unwrap();
                        let deltas: Vec<f64> = q.iter().zip(&q2).map(|(a, b)| b - a).collect();
                        assert!(deltas.iter().all(|d| d.abs() <= 1.0 + 1e-12));
                        let up = deltas.iter().any(|&d| d > 1e-12);
                        let down = deltas.iter().any(|&d| d < -1e-12);
                        assert!(!(up && down), "{values:?} -> {other:?}");
                    }
                }
            }
        }
    }
}

#[test]
fn quality_prefers_interior_threshold() {
    let spec = SyntheticSpec::HeavyTail {
        body_mass: 0.995,
        body_max: 100.0,
        tail_max: 2000.0,
    };
    let values = gen_synthetic(&spec, 1 << 14, 1).unwrap();
    let config = StreamConfig::new(2000.0, 0.1, values.len());
    let (grid, scores) = quality_scores(&values, &config).unwrap();
    let best = grid[tops_core::threshold::argmax_score(&scores).unwrap()];
    assert!(best > 50.0 && best < 400.0, "{best}");
}

#[test]
fn em_threshold_concentrates_on_constant_data() {
    let values = vec![5.0; 100];
    let config = StreamConfig::new(100.0, 10.0, 100).with_range(1024);
    let mut thetas = Vec::new();
    for seed in 0..50 {
        let d = em_threshold(&values, &config, &mut RandomSource::new(seed, 1)).unwrap();
        assert_eq!(d.method, ThresholdMethod::EmE);
        thetas.push(d.theta);
    }
    // candidates below the data pay the whole holdout in the count term
    assert!(thetas.iter().all(|&t| t >= 5.0), "{thetas:?}");
    let mut sorted = thetas.clone();
    sorted.sort_by(f64::total_cmp);
    assert!(sorted[25] <= 20.0, "{thetas:?}");
}

#[test]
fn em_threshold_respects_grid() {
    let values = vec![1.0, 2.0, 30.0, 31.0];
    let config = StreamConfig::new(64.0, 1.0, 4).with_grid(CandidateGrid::Uniform { count: 16 });
    for seed in 0..20 {
        let d = em_threshold(&values, &config, &mut RandomSource::new(seed, 1)).unwrap();
        assert!((d.theta / 4.0).fract() == 0.0 && d.theta > 0.0 && d.theta <= 64.0);
    }
}

#[test]
fn pak_threshold_golden() {
    let spec = SyntheticSpec::HeavyTail {
        body_mass: 0.995,
        body_max: 100.0,
        tail_max: 2000.0,
    };
    let values = gen_synthetic(&spec, 4096, 5).unwrap();
    let config = StreamConfig::new(2000.0, 1.0, values.len());
    let d = pak_threshold(&values, &PakParams::default(), &config, &mut RandomSource::new(17, 1)).unwrap();
    assert_eq!(d.method, ThresholdMethod::SPak);
    let ThresholdTrace::SmoothSensitivity { quantile, rank, kappa, .. } = d.trace else {
        panic!("trace")
    };
    assert_eq!(rank, (0.99575f64 * 4096.0).ceil() as usize);
    assert!(kappa >= 1.0);
    assert!(d.theta >= quantile || d.theta == 2000.0);
    assert_eq!(d.theta.to_bits(), PAK_GOLDEN.to_bits(), "{:?}", d.theta);

    let s = sp_threshold(&values, 99.5, 1e-6, &config, &mut RandomSource::new(17, 1)).unwrap();
    assert_eq!(s.method, ThresholdMethod::SP);
    assert_eq!(s.theta.to_bits(), SP_GOLDEN.to_bits(), "{:?}", s.theta);
}

const PAK_GOLDEN: f64 = 2000.0;
const SP_GOLDEN: f64 = 1242.131598470769;

#[test]
fn pak_rejects_degenerate_parameters() {
    let values = vec![1.0; 10];
    let config = StreamConfig::new(10.0, 1.0, 10);
    let params = PakParams {
        failure: 1e-12,
        ..PakParams::default()
    };
    assert!(pak_threshold(&values, &params, &config, &mut RandomSource::new(1, 1)).is_err());
}

#[test]
fn oracle_threshold_matches_direct_scan() {
    use tops_core::threshold::{oracle_threshold, range_error_model};
    let spec = SyntheticSpec::HeavyTail {
        body_mass: 0.995,
        body_max: 100.0,
        tail_max: 2000.0,
    };
    let values = gen_synthetic(&spec, 5000, 3).unwrap();
    let config = StreamConfig::new(2000.0, 0.1, values.len()).with_range(1 << 16);
    let d = oracle_threshold(&values, &config).unwrap();
    let mut best = (f64::INFINITY, 0.0);
    for theta in 1..=2000 {
        let cost = range_error_model(&values, theta as f64, &config);
        if cost < best.0 {
            best = (cost, theta as f64);
        }
    }
    assert_eq!(d.theta, best.1);
    assert_eq!(d.method, ThresholdMethod::Oracle);
}

#[test]
fn em_threshold_lands_in_oracle_basin() {
    use tops_core::threshold::{oracle_threshold, range_error_model};
    let mut values = vec![10.0; 500];
    values.extend(vec![20.0; 500]);
    let config = StreamConfig::new(1000.0, 0.1, values.len());
    let oracle = oracle_threshold(&values, &config).unwrap();
    let floor = range_error_model(&values, oracle.theta, &config);
    let (grid, scores) = quality_scores(&values, &config).unwrap();
    let best = grid[tops_core::threshold::argmax_score(&scores).unwrap()];
    let cost = range_error_model(&values, best, &config);
    assert!(cost <= 4.0 * floor, "argmax {best} vs oracle {}", oracle.theta);
    assert!((best - oracle.theta).abs() <= 10.0);
}
