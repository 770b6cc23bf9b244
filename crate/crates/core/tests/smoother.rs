use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::One;
use proptest::prelude::*;

use tops_core::smoother::{optimize_s, smoothing_error_model, SmootherKind, SmootherState};

fn rat(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// Exact error model for r = b^k: (b−1)(k−s)³·2θ²/ε² + (b^s/2)·θ²/4.
fn exact_argmin(b: i64, k: i64, theta: &BigRational, eps: &BigRational) -> u32 {
    let t2 = theta * theta;
    let e2 = eps * eps;
    let mut best = 0;
    let mut best_cost: Option<BigRational> = None;
    let mut b_pow = BigRational::one();
    for s in 0..k {
        let depth = BigRational::from_integer(BigInt::from(k - s));
        let noise = BigRational::from_integer(BigInt::from(b - 1)) * &depth * &depth * &depth * rat(2, 1) * &t2 / &e2;
        let bias = &b_pow * &t2 / rat(8, 1);
        let cost = noise + bias;
        if best_cost.as_ref().is_none_or(|c| cost < *c) {
            best = s as u32;
            best_cost = Some(cost);
        }
        b_pow *= BigRational::from_integer(BigInt::from(b));
    }
    best
}

#[test]
fn level_selection_matches_exact_oracle_on_grid() {
    let eps_grid = [rat(1, 1000), rat(1, 100), rat(1, 10), rat(1, 1), rat(10, 1)];
    let theta_grid = [rat(1, 2), rat(100, 1)];
    let mut points = 0;
    for b in [2i64, 3, 4, 8, 16] {
        for k in 2..=5i64 {
            let r = (b as u64).pow(k as u32);
            for theta in &theta_grid {
                for eps in &eps_grid {
                    let want = exact_argmin(b, k, theta, eps);
                    let theta_f = num_traits::ToPrimitive::to_f64(theta).unwrap();
                    let eps_f = num_traits::ToPrimitive::to_f64(eps).unwrap();
                    let got = optimize_s(theta_f, eps_f, r, b as u32).unwrap();
                    assert_eq!(got, want, "b={b} r={r} θ={theta} ε={eps}");
                    points += 1;
                }
            }
        }
    }
    assert_eq!(points, 200);
    assert_eq!(exact_argmin(16, 5, &rat(100, 1), &rat(1, 100)), 4);
    assert_eq!(optimize_s(100.0, 0.01, 1 << 20, 16).unwrap(), 4);
}

#[test]
fn worked_case_model_values() {
    let exact = |s: i64| {
        let noise = rat(15, 1) * BigRational::from_integer(BigInt::from((5 - s).pow(3))) * rat(2, 1) * rat(10_000, 1) / rat(1, 10_000);
        let bias = BigRational::from_integer(BigInt::from(16i64.pow(s as u32))) * rat(10_000, 8);
        num_traits::ToPrimitive::to_f64(&(noise + bias)).unwrap()
    };
    for s in 0..5 {
        let got = smoothing_error_model(100.0, 0.01, 1 << 20, 16, s as u32);
        assert!((got / exact(s) - 1.0).abs() < 1e-12, "s={s}");
    }
}

#[test]
fn recent_with_unit_groups_is_identity_after_push() {
    let mut s = SmootherState::new(SmootherKind::Recent, 1, 10.0).unwrap();
    for u in [3.0, -1.5, 7.25] {
        assert_eq!(s.next(Some(u)), u);
    }
}

fn run(kind: SmootherKind, group: u64, theta: f64, us: &[f64]) -> Vec<f64> {
    let mut state = SmootherState::new(kind, group, theta).unwrap();
    let mut out = vec![state.estimate()];
    for &u in us {
        state.push(u);
        out.push(state.estimate());
    }
    out
}

proptest! {
    #[test]
    fn exponential_limits(us in prop::collection::vec(-50.0f64..50.0, 1..40), group in 1u64..20, theta in 0.1f64..100.0) {
        let one = run(SmootherKind::Exponential { alpha: 1.0 }, group, theta, &us);
        let recent = run(SmootherKind::Recent, group, theta, &us);
        for (a, b) in one.iter().zip(&recent) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        let zero = run(SmootherKind::Exponential { alpha: 0.0 }, group, theta, &us);
        for v in zero {
            prop_assert!((v - theta / 2.0).abs() <= 1e-12 * theta);
        }
    }

    #[test]
    fn moving_average_is_convex(us in prop::collection::vec(-50.0f64..50.0, 1..40), group in 1u64..20, window in 1usize..8) {
        let theta = 10.0;
        let out = run(SmootherKind::MovingAverage { window }, group, theta, &us);
        let mut seq = vec![group as f64 * theta / 2.0];
        seq.extend_from_slice(&us);
        for (t, v) in out.iter().enumerate() {
            let lo_idx = (t + 1).saturating_sub(window);
            let win = &seq[lo_idx..=t];
            let lo = win.iter().cloned().fold(f64::INFINITY, f64::min) / group as f64;
            let hi = win.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / group as f64;
            prop_assert!(*v >= lo - 1e-9 && *v <= hi + 1e-9);
        }
    }

    #[test]
    fn median_matches_sorted_history(us in prop::collection::vec(-50.0f64..50.0, 1..40), group in 1u64..8) {
        let out = run(SmootherKind::Median, group, 4.0, &us);
        for t in 1..out.len() {
            let mut h = us[..t].to_vec();
            h.sort_by(f64::total_cmp);
            let n = h.len();
            let med = if n % 2 == 1 { h[n / 2] } else { 0.5 * (h[n / 2 - 1] + h[n / 2]) };
            prop_assert!((out[t] - med / group as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_divides_running_sum_by_group_count(us in prop::collection::vec(-50.0f64..50.0, 1..40), group in 1u64..8) {
        let theta = 6.0;
        let out = run(SmootherKind::Mean, group, theta, &us);
        let prior = group as f64 * theta / 2.0;
        for t in 1..out.len() {
            let total: f64 = prior + us[..t].iter().sum::<f64>();
            prop_assert!((out[t] - total / (group as f64 * t as f64)).abs() < 1e-9);
        }
    }

    #[test]
    fn level_choice_ignores_theta(theta in 1e-6f64..1e6, eps in 1e-3f64..10.0, b in 2u32..17, k in 2u32..5) {
        let r = (b as u64).pow(k);
        prop_assert_eq!(optimize_s(theta, eps, r, b).unwrap(), optimize_s(1.0, eps, r, b).unwrap());
    }
}
