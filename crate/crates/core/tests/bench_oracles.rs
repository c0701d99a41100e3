mod common;

use dxloop_core::bench::*;
use dxloop_core::domain::Outcome;
use dxloop_core::policy::{DecisionThresholds, OutcomeProbs};
use dxloop_core::seed;
use rand::Rng;

#[test]
fn auc_matches_pair_counting() {
    let mut rng = seed::rng(1);
    for _ in 0..20 {
        let n = 1000;
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        // coarse scores so ties are common
        let scores: Vec<f64> = labels
            .iter()
            .map(|l| (rng.gen::<f64>() * 20.0).floor() + if *l { 2.0 } else { 0.0 })
            .collect();
        let got = roc_auc(&scores, &labels).unwrap();
        assert!((got - common::pair_count_auc(&scores, &labels)).abs() < 1e-12);
        let transformed: Vec<f64> = scores.iter().map(|s| (0.15 * s).exp() - 7.0).collect();
        assert!((roc_auc(&transformed, &labels).unwrap() - got).abs() < 1e-12);
    }
}

#[test]
fn auc_of_independent_labels_is_half() {
    let mut rng = seed::rng(2);
    let n = 10_000;
    let scores: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
    let auc = roc_auc(&scores, &labels).unwrap();
    assert!((auc - 0.5).abs() < 0.02, "{auc}");
}

#[test]
fn sensitivities_match_confusion_matrix() {
    let mut rng = seed::rng(3);
    let t = DecisionThresholds::default();
    let cases: Vec<(OutcomeProbs, Outcome)> = (0..500)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().powi(2);
            let a: f64 = (1.0 - u) * rng.gen::<f64>().powf(0.2);
            let probs = OutcomeProbs::from_array([u, a, 1.0 - u - a]);
            let truth = [Outcome::Unknown, Outcome::AD, Outcome::CN][rng.gen_range(0..3)];
            (probs, truth)
        })
        .collect();
    // rows: truth, columns: decision
    let mut confusion = [[0usize; 3]; 3];
    for (p, truth) in &cases {
        let decision = if p.ad >= 0.95 {
            1
        } else if p.cn >= 0.95 {
            2
        } else {
            0
        };
        let row = match truth {
            Outcome::Unknown => 0,
            Outcome::AD => 1,
            Outcome::CN => 2,
        };
        confusion[row][decision] += 1;
    }
    let got = sensitivities_at_operating_point(&cases, &t);
    for k in 0..3 {
        let total: usize = confusion[k].iter().sum();
        let expected = confusion[k][k] as f64 / total as f64;
        assert!((got[k].clone().unwrap() - expected).abs() < 1e-15);
    }
}

#[test]
fn bootstrap_interval_covers_true_accuracy() {
    let covered = common::bootstrap_coverage(200, 2500, 400);
    assert!(covered >= 180, "coverage {covered}/200");
}

#[test]
fn bootstrap_is_reproducible() {
    let cases: Vec<f64> = (0..300).map(|i| (i as f64 * 0.37).sin()).collect();
    let cfg = BootstrapConfig {
        sample_size: 2500,
        trials: 2000,
        seed: 5,
    };
    let mean = |s: &[&f64]| Ok(s.iter().copied().sum::<f64>() / s.len() as f64);
    let a = bootstrap_ci(&cases, mean, &cfg).unwrap();
    let b = bootstrap_ci(&cases, mean, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.lo < a.hi);
}
