mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use think3d::error::Error;
use think3d::eval::{exact_match_accuracy, mean_relative_accuracy, run_benchmark, DecodingSpec, MRA_THRESHOLDS};
use think3d::task::{generate_dataset, label_balance, Answer, QuestionKind};
use think3d::trajectory::FormatGrammar;

/// Threshold loop written from the definition: confidence levels
/// 0.50..0.95 in steps of 0.05, pass when the relative error is strictly
/// inside the band.
fn brute_mra(pred: f64, truth: f64) -> f64 {
    let rel = (pred - truth).abs() / truth;
    let mut pass = 0;
    for i in 10..20 {
        let c = i as f64 / 20.0;
        if rel < 1.0 - c {
            pass += 1;
        }
    }
    pass as f64 / 10.0
}

#[test]
fn mra_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..10_000 {
        let truth = rng.gen_range(0.1..20.0);
        let pred = truth * rng.gen_range(0.0..2.2);
        assert_eq!(mean_relative_accuracy(pred, truth, &MRA_THRESHOLDS).unwrap(), brute_mra(pred, truth));
    }
    // Band edges on exactly representable cases.
    assert_eq!(mean_relative_accuracy(1.5, 1.0, &MRA_THRESHOLDS).unwrap(), 0.0);
    assert_eq!(mean_relative_accuracy(1.25, 1.0, &MRA_THRESHOLDS).unwrap(), 0.5);
    assert_eq!(mean_relative_accuracy(1.0, 1.0, &MRA_THRESHOLDS).unwrap(), 1.0);
    assert!(matches!(
        mean_relative_accuracy(1.0, -2.0, &MRA_THRESHOLDS),
        Err(Error::NonPositiveTruth(_))
    ));
}

#[test]
fn mra_is_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut compared = 0;
    for _ in 0..1000 {
        let truth = rng.gen_range(0.1..20.0);
        let pred = truth * rng.gen_range(0.0..2.2);
        let base = mean_relative_accuracy(pred, truth, &MRA_THRESHOLDS).unwrap();
        // Powers of two scale without rounding.
        let s2 = 2f64.powi(rng.gen_range(-20..20));
        assert_eq!(mean_relative_accuracy(pred * s2, truth * s2, &MRA_THRESHOLDS).unwrap(), base);
        // Arbitrary scalings, away from the band edges where one rounding
        // step could flip a comparison.
        let s = rng.gen_range(1e-3..1e3);
        let rel = (pred - truth).abs() / truth;
        if MRA_THRESHOLDS.iter().all(|t| ((1.0 - t) - rel).abs() > 1e-9) {
            compared += 1;
            assert_eq!(mean_relative_accuracy(pred * s, truth * s, &MRA_THRESHOLDS).unwrap(), base);
        }
    }
    assert!(compared > 990);
}

fn mc_dataset(count: usize, seed: u64) -> Vec<think3d::task::TrainingExample> {
    let mut cfg = common::tiny_dataset(count, seed);
    cfg.kinds = vec![QuestionKind::RelativeDirection, QuestionKind::Rotation, QuestionKind::Count];
    generate_dataset(&cfg).unwrap()
}

#[test]
fn constant_prediction_sits_in_the_chance_band() {
    let data = mc_dataset(600, 2);
    for (kind, counts) in label_balance(&data) {
        let n: usize = counts.iter().sum();
        if !kind.is_multiple_choice() {
            assert_eq!(n, 0);
            continue;
        }
        assert!(counts.iter().all(|&c| (c as f64 / n as f64 - 0.25).abs() <= 0.10), "{counts:?}");
    }
    let truths: Vec<String> = data.iter().map(|e| e.question.answer.text()).collect();
    for label in ["A", "B", "C", "D"] {
        let acc = exact_match_accuracy(&vec![label.to_string(); truths.len()], &truths).unwrap();
        assert!((0.15..=0.35).contains(&acc), "{label}: {acc}");
    }
}

#[test]
fn untrained_model_is_at_chance_and_reports_are_reproducible() {
    let data = mc_dataset(500, 3);
    let (models, params) = common::tiny_models();
    let grammar = FormatGrammar::new(common::K);
    let spec = DecodingSpec::default();
    let a = run_benchmark(&models, &params, &data, &grammar, &spec).unwrap();
    let b = run_benchmark(&models, &params, &data, &grammar, &spec).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.count, 500);
    let correct: f64 = a.per_kind.iter().map(|k| k.value * k.count as f64).sum();
    let acc = correct / 500.0;
    assert!((0.15..=0.35).contains(&acc), "{acc}");
    // The average is the unweighted mean over kinds.
    let mean = a.per_kind.iter().map(|k| k.value).sum::<f64>() / a.per_kind.len() as f64;
    assert!((a.average - mean).abs() < 1e-15);
    assert!(a.per_kind.iter().all(|k| k.metric == "accuracy"));
    assert!((0.0..=1.0).contains(&a.format_compliance) && (0.0..=1.0).contains(&a.degenerate_rate));
}

#[test]
fn numeric_items_are_scored_by_mra() {
    let mut cfg = common::tiny_dataset(40, 4);
    cfg.kinds = vec![QuestionKind::NumericDistance];
    let data = generate_dataset(&cfg).unwrap();
    assert!(data.iter().all(|e| matches!(e.question.answer, Answer::Number(v) if v > 0.0)));
    let (models, params) = common::tiny_models();
    let r = run_benchmark(&models, &params, &data, &FormatGrammar::new(common::K), &DecodingSpec::default()).unwrap();
    assert_eq!(r.per_kind.len(), 1);
    assert_eq!(r.per_kind[0].metric, "mra");
    assert!((0.0..=1.0).contains(&r.average));
}

#[test]
fn accuracy_rejects_mismatched_lengths() {
    let a = vec!["A".to_string()];
    assert!(matches!(exact_match_accuracy(&a, &[]), Err(Error::LengthMismatch(1, 0))));
}
