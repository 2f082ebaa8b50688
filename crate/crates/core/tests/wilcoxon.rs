//! Signed-rank test against exhaustive sign enumeration.

mod common;

use common::oracles::brute_force;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slicegen_core::stats::{average_ranks, wilcoxon_signed_rank, wilcoxon_signed_rank_normal, PMethod};

#[test]
fn every_sign_pattern_at_n8_matches_enumeration() {
    let magnitude_sets: [[f64; 8]; 3] = [
        [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
        [0.5, 0.5, 1.25, 2.0, 2.0, 2.0, 3.5, 9.0],
        [0.1, 0.3, 0.3, 0.7, 1.1, 1.3, 4.2, 4.2],
    ];
    for mags in magnitude_sets {
        for pattern in 0u32..256 {
            let diffs: Vec<f64> = mags
                .iter()
                .enumerate()
                .map(|(i, &m)| if pattern >> i & 1 == 1 { m } else { -m })
                .collect();
            let r = wilcoxon_signed_rank(&diffs).unwrap();
            let (pl, pu, p2) = brute_force(&diffs);
            assert_eq!(r.method, PMethod::Exact);
            assert!((r.p_lower - pl).abs() < 1e-12, "pattern {pattern:08b}");
            assert!((r.p_upper - pu).abs() < 1e-12, "pattern {pattern:08b}");
            assert!((r.p_two_sided - p2).abs() < 1e-12, "pattern {pattern:08b}");
            assert!((r.w_plus + r.w_minus - 36.0).abs() < 1e-12);
        }
    }
}

#[test]
fn six_negative_differences() {
    let r = wilcoxon_signed_rank(&[-0.3, -0.1, -0.2, -0.6, -0.5, -0.4]).unwrap();
    assert_eq!(r.p_lower, 1.0 / 64.0);
    assert_eq!(r.p_two_sided, 1.0 / 32.0);
}

#[test]
fn zeros_are_dropped() {
    let with = wilcoxon_signed_rank(&[0.0, 1.0, -2.0, 3.0, 0.0, 4.0]).unwrap();
    let without = wilcoxon_signed_rank(&[1.0, -2.0, 3.0, 4.0]).unwrap();
    assert_eq!(with, without);
    let none = wilcoxon_signed_rank(&[0.0, 0.0]).unwrap();
    assert_eq!((none.p_two_sided, none.method), (1.0, PMethod::Degenerate));
}

#[test]
fn non_finite_input_is_an_error() {
    assert!(wilcoxon_signed_rank(&[1.0, f64::NAN]).is_err());
}

#[test]
fn exact_and_normal_paths_agree_at_n25() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for trial in 0..200 {
        let shift = rng.gen_range(-0.6..0.6);
        let diffs: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0) + shift).collect();
        let exact = wilcoxon_signed_rank(&diffs).unwrap();
        assert_eq!(exact.method, PMethod::Exact);
        // Independent normal approximation with continuity correction.
        let n = 25.0f64;
        let mean = n * (n + 1.0) / 4.0;
        let sd = (n * (n + 1.0) * (2.0 * n + 1.0) / 24.0).sqrt();
        let z_lo = (exact.w_plus + 0.5 - mean) / sd;
        let z_hi = (exact.w_plus - 0.5 - mean) / sd;
        let phi = |z: f64| 0.5 * erfc(-z / std::f64::consts::SQRT_2);
        let approx = (2.0 * phi(z_lo).min(1.0 - phi(z_hi))).min(1.0);
        assert!(
            (exact.p_two_sided - approx).abs() <= 0.01,
            "trial {trial}: exact {} vs normal {approx}",
            exact.p_two_sided
        );
    }
}

#[test]
fn library_paths_agree_at_n25() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    for _ in 0..200 {
        let shift = rng.gen_range(-0.5..0.5);
        let diffs: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0) + shift).collect();
        let exact = wilcoxon_signed_rank(&diffs).unwrap();
        let normal = wilcoxon_signed_rank_normal(&diffs).unwrap();
        assert_eq!((exact.method, normal.method), (PMethod::Exact, PMethod::Normal));
        assert!((exact.p_two_sided - normal.p_two_sided).abs() <= 0.01);
    }
    let over = vec![0.5; 26];
    assert_eq!(wilcoxon_signed_rank(&over).unwrap().method, PMethod::Normal);
}

/// Complementary error function (Numerical Recipes' Chebyshev fit, |err| < 1.2e-7).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let r = t * (-z * z - 1.26551223
        + t * (1.00002368
            + t * (0.37409196
                + t * (0.09678418
                    + t * (-0.18628806
                        + t * (0.27886807
                            + t * (-1.13520398 + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

proptest! {
    #[test]
    fn ranks_sum_to_triangular_number(values in prop::collection::vec(0u8..6, 1..30)) {
        let v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
        let (ranks, ties) = average_ranks(&v);
        let n = v.len() as f64;
        prop_assert!((ranks.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
        prop_assert_eq!(ties.iter().sum::<usize>(), v.len());
    }

    #[test]
    fn p_values_are_probabilities(diffs in prop::collection::vec(-5i32..5, 1..40)) {
        let d: Vec<f64> = diffs.iter().map(|&x| x as f64).collect();
        let r = wilcoxon_signed_rank(&d).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.p_two_sided));
        prop_assert!(r.p_lower + r.p_upper >= 1.0 - 1e-9);
    }

    #[test]
    fn negating_swaps_tails(diffs in prop::collection::vec(-100i32..100, 1..20)) {
        let d: Vec<f64> = diffs.iter().map(|&x| x as f64).collect();
        let neg: Vec<f64> = d.iter().map(|x| -x).collect();
        let (a, b) = (wilcoxon_signed_rank(&d).unwrap(), wilcoxon_signed_rank(&neg).unwrap());
        prop_assert!((a.p_lower - b.p_upper).abs() < 1e-12);
        prop_assert!((a.p_two_sided - b.p_two_sided).abs() < 1e-12);
    }
}
