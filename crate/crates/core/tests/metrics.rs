mod common;

use common::{rng, tiny_config};
use ian_core::data::synthetic_shapes;
use ian_core::ian::{MdcMode, TrainConfig};
use ian_core::metrics::{
    config_hash, factorial, feature_l2, pixel_l2, quality_score, run_ablation, AblationBudget, AblationFlags,
    AblationReport, ClassifierConfig, EvalClassifier,
};
use ian_core::Tensor64;
use proptest::prelude::*;

fn probs_from(rows: &[Vec<f64>]) -> Tensor64 {
    let k = rows[0].len();
    Tensor64::new([rows.len(), k], rows.concat()).unwrap()
}

/// Straight-line score on one split, kept independent of the library code.
fn score_oracle(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len() as f64;
    let k = rows[0].len();
    let marginal: Vec<f64> = (0..k).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut kl = 0.0;
    for r in rows {
        for j in 0..k {
            if r[j] > 0.0 {
                kl += r[j] * (r[j] / marginal[j]).ln();
            }
        }
    }
    (kl / n).exp()
}

fn random_rows(n: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let t = Tensor64::uniform([n, k], 0.01, 1.0, &mut rng(seed));
    t.data()
        .chunks(k)
        .map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(|v| v / s).collect()
        })
        .collect()
}

#[test]
fn uniform_predictions_score_one() {
    let rows = vec![vec![0.1; 10]; 200];
    let (mean, std) = quality_score(&probs_from(&rows), 10).unwrap();
    assert!((mean - 1.0).abs() < 1e-12);
    assert!(std < 1e-12);
}

#[test]
fn balanced_one_hot_scores_class_count() {
    let k = 10;
    let rows: Vec<Vec<f64>> = (0..500).map(|i| (0..k).map(|j| if j == i % k { 1.0 } else { 0.0 }).collect()).collect();
    let (mean, std) = quality_score(&probs_from(&rows), 10).unwrap();
    assert!((mean - k as f64).abs() < 1e-9, "{mean}");
    assert!(std < 1e-9);
}

#[test]
fn score_matches_oracle_per_split() {
    let rows = random_rows(300, 6, 2);
    let (mean, std) = quality_score(&probs_from(&rows), 3).unwrap();
    let parts: Vec<f64> = rows.chunks(100).map(score_oracle).collect();
    let m = parts.iter().sum::<f64>() / 3.0;
    let s = (parts.iter().map(|p| (p - m).powi(2)).sum::<f64>() / 3.0).sqrt();
    assert!((mean - m).abs() < 1e-12);
    assert!((std - s).abs() < 1e-12);
}

#[test]
fn score_needs_enough_samples() {
    let rows = random_rows(99, 4, 3);
    assert!(quality_score(&probs_from(&rows), 10).is_err());
    assert!(quality_score(&probs_from(&rows), 0).is_err());
    assert!(quality_score(&Tensor64::zeros([100]), 10).is_err());
}

#[test]
fn pixel_l2_of_constant_images() {
    let ones = Tensor64::full([2, 3, 4, 4], 1.0);
    let zeros = Tensor64::zeros([2, 3, 4, 4]);
    assert_eq!(pixel_l2(&ones, &zeros).unwrap(), 1.0);
    assert_eq!(pixel_l2(&ones, &ones).unwrap(), 0.0);
    assert!(pixel_l2(&ones, &Tensor64::zeros([2, 3, 4, 5])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pixel_l2_is_a_metric(seed in 0u64..1000) {
        let mut r = rng(seed);
        let x = Tensor64::uniform([2, 3, 4, 4], 0.0, 1.0, &mut r);
        let y = Tensor64::uniform([2, 3, 4, 4], 0.0, 1.0, &mut r);
        let z = Tensor64::uniform([2, 3, 4, 4], 0.0, 1.0, &mut r);
        let d = |a: &Tensor64, b: &Tensor64| pixel_l2(a, b).unwrap();
        prop_assert_eq!(d(&x, &x), 0.0);
        prop_assert!((d(&x, &y) - d(&y, &x)).abs() < 1e-15);
        prop_assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z) + 1e-12);
    }

    #[test]
    fn score_lies_between_one_and_class_count(seed in 0u64..1000, k in 2usize..8) {
        let rows = random_rows(100, k, seed);
        let (mean, _) = quality_score(&probs_from(&rows), 5).unwrap();
        prop_assert!(mean >= 1.0 - 1e-12 && mean <= k as f64 + 1e-12);
    }
}

fn small_classifier(seed: u64) -> EvalClassifier<f64> {
    let mut cfg = ClassifierConfig::new(16, 10);
    cfg.width = 4;
    cfg.feature_dim = 16;
    EvalClassifier::new(cfg, &mut rng(seed)).unwrap()
}

#[test]
fn feature_l2_is_a_metric() {
    let clf = small_classifier(4);
    let mut r = rng(5);
    let x = Tensor64::uniform([3, 3, 16, 16], -1.0, 1.0, &mut r);
    let y = Tensor64::uniform([3, 3, 16, 16], -1.0, 1.0, &mut r);
    let z = Tensor64::uniform([3, 3, 16, 16], -1.0, 1.0, &mut r);
    let d = |a: &Tensor64, b: &Tensor64| feature_l2(&clf, a, b).unwrap();
    assert_eq!(d(&x, &x), 0.0);
    assert!((d(&x, &y) - d(&y, &x)).abs() < 1e-12);
    assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z) + 1e-12);
}

#[test]
fn classifier_probabilities_are_distributions() {
    let clf = small_classifier(6);
    let x = Tensor64::uniform([5, 3, 16, 16], -1.0, 1.0, &mut rng(7));
    let p = clf.probabilities(&x).unwrap();
    assert_eq!(p.shape(), &[5, 10]);
    for row in p.data().chunks(10) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v > 0.0));
    }
    assert_eq!(clf.features(&x).unwrap().shape(), &[5, 16]);
}

#[test]
fn classifier_learns_shapes() {
    let data = synthetic_shapes::<f64>(400, 16, 8);
    let labels = data.labels.clone().unwrap();
    let mut clf = small_classifier(9);
    let before = clf.accuracy(&data.images, &labels).unwrap();
    let loss = clf.train(&data.images, &labels, 4, 20, 10).unwrap();
    let after = clf.accuracy(&data.images, &labels).unwrap();
    assert!(loss.is_finite());
    assert!(after > before.max(0.3), "accuracy {before} -> {after}");
}

#[test]
fn factorial_covers_every_combination_once() {
    let f = factorial();
    assert_eq!(f.len(), 8);
    let set: std::collections::HashSet<_> = f.iter().collect();
    assert_eq!(set.len(), 8);
    assert_eq!(f[0], AblationFlags { mdc: false, ortho: false, ternary: false });
    assert_eq!(f[7], AblationFlags { mdc: true, ortho: true, ternary: true });
}

fn tiny_budget() -> AblationBudget {
    AblationBudget {
        model: tiny_config(MdcMode::Standard),
        train: TrainConfig::default(),
        ortho_coefficient: 1e-4,
        epochs: 1,
        batch: 8,
        samples: 20,
        splits: 2,
        seed: 11,
    }
}

#[test]
fn config_hash_separates_configurations() {
    let b = tiny_budget();
    let hashes: std::collections::HashSet<String> = factorial().into_iter().map(|f| config_hash(f, &b)).collect();
    assert_eq!(hashes.len(), 8);
    let f = factorial()[3];
    assert_eq!(config_hash(f, &b), config_hash(f, &b.clone()));
    let mut other = b.clone();
    other.seed += 1;
    assert_ne!(config_hash(f, &b), config_hash(f, &other));
}

#[test]
fn ablation_reruns_are_identical() {
    let data = synthetic_shapes::<f64>(40, 16, 12);
    let (held, train) = data.split(8).unwrap();
    let clf = small_classifier(13);
    let configs = [factorial()[0], factorial()[7]];
    let a = run_ablation(&configs, &train.images, &held.images, &clf, &tiny_budget()).unwrap();
    let b = run_ablation(&configs, &train.images, &held.images, &clf, &tiny_budget()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 2);
    for row in &a.rows {
        assert!(row.error.is_none(), "{:?}", row.error);
        assert!(row.pixel.unwrap() > 0.0 && row.feature.unwrap() > 0.0);
        assert!(row.score_mean.unwrap() >= 1.0);
    }
    let csv = a.to_csv().unwrap();
    assert!(csv.starts_with("mdc,ortho,ternary,pixel,feature,score_mean,score_std,config_hash,error"));
    assert_eq!(AblationReport::from_csv(&csv).unwrap(), a);
    let json: AblationReport = serde_json::from_str(&a.to_json().unwrap()).unwrap();
    assert_eq!(json, a);
}

#[test]
fn failed_configuration_is_reported_not_fatal() {
    let data = synthetic_shapes::<f64>(40, 16, 14);
    let (held, train) = data.split(8).unwrap();
    let clf = small_classifier(15);
    let mut budget = tiny_budget();
    budget.train.adam.lr = f64::INFINITY;
    let report = run_ablation(&[factorial()[0]], &train.images, &held.images, &clf, &budget).unwrap();
    assert!(report.rows[0].error.is_some());
    assert!(report.rows[0].pixel.is_none());
}
