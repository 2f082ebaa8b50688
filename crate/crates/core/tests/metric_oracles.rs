//! Image metrics against direct, unoptimized re-implementations.

mod common;

use common::oracles::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slicegen_core::image::Image;
use slicegen_core::metrics::*;

const TOL: f64 = 1e-6;

#[test]
fn ssim_matches_direct_window_sum() {
    for seed in 0..6 {
        let (a, b) = smooth_pair(seed, 24);
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < TOL);
        let (x, y) = (noise(seed, 20, 17), noise(seed + 100, 20, 17));
        assert!((ssim(&x, &y).unwrap() - ssim_oracle(&x, &y)).abs() < TOL);
    }
}

#[test]
fn psnr_matches_oracle() {
    for seed in 0..6 {
        let (a, b) = smooth_pair(seed, 16);
        assert!((psnr(&a, &b).unwrap() - psnr_oracle(&a, &b)).abs() < TOL);
    }
}

#[test]
fn nmi_matches_hashed_histogram() {
    for seed in 0..6 {
        let (a, b) = smooth_pair(seed, 32);
        assert!((nmi(&a, &b).unwrap() - nmi_oracle(&a, &b)).abs() < TOL);
        let (x, y) = (noise(seed, 9, 30), noise(seed + 50, 9, 30));
        assert!((nmi(&x, &y).unwrap() - nmi_oracle(&x, &y)).abs() < TOL);
    }
    // Bin edges: 1.0 folds into the last bin.
    let edge = Image::from_fn(4, 4, |r, c| ((r * 4 + c) as f64 / 15.0).min(1.0));
    let rev = Image::from_fn(4, 4, |r, c| 1.0 - edge.get(r, c));
    assert!((nmi(&edge, &rev).unwrap() - nmi_oracle(&edge, &rev)).abs() < TOL);
}

#[test]
fn cv_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let n = rng.gen_range(2..8);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(100.0..5000.0)).collect();
        assert!((cv(&x).unwrap() - cv_oracle(&x)).abs() < TOL);
    }
}

#[test]
fn identity_cases() {
    let x = noise(3, 32, 32);
    let f = FeatureExtractor::<f64>::seeded(FeatureExtractor::<f64>::DEFAULT_SEED);
    assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(lpips(&x, &x, &f).unwrap(), 0.0);
    assert!((nmi(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(cv(&[812.5, 812.5, 812.5]).unwrap(), 0.0);
    assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
}

#[test]
fn shape_mismatch_is_rejected() {
    let (a, b) = (noise(1, 16, 16), noise(2, 16, 15));
    assert!(ssim(&a, &b).is_err());
    assert!(nmi(&a, &b).is_err());
    assert!(psnr(&a, &b).is_err());
}

#[test]
fn lpips_grows_with_distortion() {
    let (a, _) = smooth_pair(4, 64);
    let f = FeatureExtractor::<f64>::seeded(FeatureExtractor::<f64>::DEFAULT_SEED);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let perturb: Vec<f64> = (0..a.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let at = |s: f64| {
        let data = a.as_slice().iter().zip(&perturb).map(|(v, p)| (v + s * p).clamp(0.0, 1.0)).collect();
        lpips(&a, &Image::new(64, 64, data).unwrap(), &f).unwrap()
    };
    assert!(at(0.02) < at(0.1) && at(0.1) < at(0.3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ssim_symmetric_and_bounded(seed in 0u64..10_000) {
        let (a, b) = (noise(seed, 16, 16), noise(seed ^ 0xabc, 16, 16));
        let (s1, s2) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((s1 - s2).abs() < 1e-12);
        prop_assert!(s1 <= 1.0 + 1e-12 && s1 >= -1.0);
    }

    #[test]
    fn nmi_symmetric_in_unit_interval(seed in 0u64..10_000) {
        let (a, b) = (noise(seed, 12, 12), noise(seed ^ 0x5a5a, 12, 12));
        let (n1, n2) = (nmi(&a, &b).unwrap(), nmi(&b, &a).unwrap());
        prop_assert!((n1 - n2).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&n1));
    }

    #[test]
    fn cv_scale_invariant(values in prop::collection::vec(1.0f64..1e4, 2..10), k in 0.01f64..100.0) {
        let scaled: Vec<f64> = values.iter().map(|v| v * k).collect();
        prop_assert!((cv(&values).unwrap() - cv(&scaled).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn lpips_nonnegative_and_symmetric(seed in 0u64..1000) {
        let f = FeatureExtractor::<f64>::seeded(FeatureExtractor::<f64>::DEFAULT_SEED);
        let (a, b) = (noise(seed, 16, 16), noise(seed + 1, 16, 16));
        let (d1, d2) = (lpips(&a, &b, &f).unwrap(), lpips(&b, &a, &f).unwrap());
        prop_assert!(d1 >= 0.0);
        prop_assert!((d1 - d2).abs() < 1e-12);
    }
}
