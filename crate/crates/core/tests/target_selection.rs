//! Target-slice selection against brute-force search.

mod common;

use common::oracles::*;
use proptest::prelude::*;
use slicegen_core::phantom::generate_volume;
use slicegen_core::preprocess::window_and_rescale;
use slicegen_core::targetsel::*;

#[test]
fn registration_equals_exhaustive_slice_and_shift_search() {
    let search = TranslationSearch::default();
    for (seed, shift) in [(1u64, (4i64, -2i64)), (2, (0, 6)), (3, (-8, 8))] {
        let cfg = config(seed, "reg", 8);
        let volume = generate_volume::<f32>(&cfg).unwrap();
        // Reference from a different subject, so no slice is a near copy.
        let other = config(seed + 100, "atlas", 8).subject().unwrap();
        let reference = reference(&other, 77, shift);

        let best = exhaustive_registration(&volume, &reference.pixels);
        let sel = select_target_registration(&volume, &reference, search).unwrap();
        assert_eq!(sel.slice_index, best.0, "seed {seed}");
        assert!((sel.score - best.1).abs() < 1e-9);
        assert_eq!(sel.method, SelectionMethod::Registration);
    }
}

#[test]
fn registration_recovers_the_shift_of_a_translated_copy() {
    let cfg = config(4, "self", 8);
    let volume = generate_volume::<f32>(&cfg).unwrap();
    let slice = window_and_rescale(&volume.slice(5).unwrap()).unwrap();
    let reference = slice.with_pixels(translate(&slice.pixels, (6, -4)));
    let scores = registration_scores(&volume, &reference, TranslationSearch::default()).unwrap();
    assert_eq!(scores[5].1, (6, -4));
    let sel = select_target_registration(&volume, &reference, TranslationSearch::default()).unwrap();
    assert_eq!(sel.slice_index, 5);
}

#[test]
fn invalid_search_is_a_config_error() {
    let volume = generate_volume::<f32>(&config(5, "bad", 4)).unwrap();
    let reference = window_and_rescale(&volume.slice(0).unwrap()).unwrap();
    let err = select_target_registration(&volume, &reference, TranslationSearch { radius: 256, step: 2 });
    assert!(matches!(err, Err(slicegen_core::Error::Config { .. })));
    let err = select_target_registration(&volume, &reference, TranslationSearch { radius: 4, step: 0 });
    assert!(err.is_err());
}

#[test]
fn raw_reference_is_rejected() {
    let volume = generate_volume::<f32>(&config(5, "raw", 4)).unwrap();
    let raw = volume.slice(0).unwrap();
    assert!(select_target_registration(&volume, &raw, TranslationSearch::default()).is_err());
}

#[test]
fn bpr_with_unbiased_scores_finds_the_target() {
    for seed in 0..5 {
        let cfg = config(seed, "bpr", 64);
        let subject = cfg.subject().unwrap();
        let volume = generate_volume::<f32>(&cfg).unwrap();
        let reference_score = slicegen_core::phantom::anatomy_score(0.0);
        let sel = select_target_bpr(&volume.subject_id, &volume.anatomy_score, reference_score).unwrap();
        assert_eq!(sel.slice_index, subject.target_index);
    }
}

#[test]
fn semi_bpr_recovers_plus_five_displacement() {
    for seed in 0..4 {
        let (got, want) = semi_bpr_recovers(seed, 5);
        assert_eq!(got, want, "seed {seed}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn semi_bpr_recovers_any_displacement_within_radius(seed in 0u64..1000, d in -8i64..=8) {
        let (got, want) = semi_bpr_recovers(seed, d);
        prop_assert_eq!(got, want);
    }

    #[test]
    fn bpr_picks_a_nearest_score(scores in prop::collection::vec(-10.0f64..10.0, 1..40), r in -12.0f64..12.0) {
        let sel = select_target_bpr("s", &scores, r).unwrap();
        let best = scores.iter().map(|s| (s - r).abs()).fold(f64::INFINITY, f64::min);
        prop_assert_eq!((scores[sel.slice_index] - r).abs(), best);
        prop_assert!(scores[..sel.slice_index].iter().all(|s| (s - r).abs() > best));
    }
}
