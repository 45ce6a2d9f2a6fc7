use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use renalct::backend::{noisy_stub_generate, stub_generate};
use renalct::extract::parse_report_rule_based;
use renalct::metrics::random_baseline;
use renalct::phantom::{random_feature_set, sample_cohort, MarginalMode, PhantomConfig};
use renalct::predictor::{constant_predictor, evaluate, join_predictions, oracle_predictor, random_predictor};
use renalct::schema::{FeatureSet, Feature};

#[test]
fn stub_then_rule_parse_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut failures = Vec::new();
    for _ in 0..1000 {
        let f = random_feature_set(&mut rng);
        let text = stub_generate(&f);
        let back = parse_report_rule_based(&text).features;
        if back != f {
            failures.push((text, f, back));
        }
    }
    assert!(failures.is_empty(), "{} mismatches, first: {:?}", failures.len(), failures.first());
}

fn agreement(truth: &FeatureSet, got: &FeatureSet) -> f64 {
    let hits = Feature::CATEGORICAL.iter().filter(|&&f| truth.token(f) == got.token(f)).count()
        + usize::from(truth.size_cm == got.size_cm);
    hits as f64 / Feature::ALL.len() as f64
}

fn mean_agreement(noise: f64, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = (0..samples)
        .map(|i| {
            let f = random_feature_set(&mut rng);
            let text = noisy_stub_generate(&f, noise, seed.wrapping_add(i as u64));
            agreement(&f, &parse_report_rule_based(&text).features)
        })
        .sum();
    total / samples as f64
}

#[test]
fn agreement_degrades_monotonically_with_noise() {
    let levels = [0.0, 0.2, 0.5, 0.8];
    let scores: Vec<f64> = levels.iter().map(|&n| mean_agreement(n, 500, 11)).collect();
    assert_eq!(scores[0], 1.0);
    for w in scores.windows(2) {
        assert!(w[1] <= w[0], "{scores:?}");
    }
    assert!(scores[3] < 0.5, "{scores:?}");
}

fn reference_cohort() -> renalct::schema::CohortManifest {
    sample_cohort(&PhantomConfig {
        marginal_mode: MarginalMode::Exact,
        ..Default::default()
    })
    .unwrap()
    .manifest
}

#[test]
fn oracle_predictions_reach_metric_maxima() {
    let m = reference_cohort();
    let set = join_predictions(&m, &oracle_predictor(&m), None).unwrap();
    let table = evaluate(&set, "all");
    for row in &table.rows {
        if row.feature == Feature::Size {
            assert_eq!(row.f1_or_mse, Some(0.0));
        } else {
            assert_eq!(row.f1_or_mse, Some(1.0), "{:?}", row.feature);
            assert_eq!(row.auc, None);
        }
    }
    assert_eq!(set.coverage(), 1.0);
}

#[test]
fn constant_cyst_accuracy_matches_marginals() {
    let m = reference_cohort();
    let acc = |v: &str| {
        let set = join_predictions(&m, &constant_predictor(&m, Feature::Cyst, v).unwrap(), None).unwrap();
        evaluate(&set, "all").rows.iter().find(|r| r.feature == Feature::Cyst).unwrap().accuracy.unwrap()
    };
    assert!((acc("true") - 78.0 / 130.0).abs() < 1e-12);
    assert!((acc("false") - 52.0 / 130.0).abs() < 1e-12);
}

#[test]
fn missing_rows_reduce_coverage() {
    let m = reference_cohort();
    let mut rows = oracle_predictor(&m);
    rows.drain(10..15);
    let set = join_predictions(&m, &rows, None).unwrap();
    assert_eq!(set.missing.len(), 5);
    assert_eq!(set.ids.len(), 125);
    assert!((set.coverage() - 125.0 / 130.0).abs() < 1e-12);
    assert!(set.warnings[0].contains(&set.missing[0]));
}

#[test]
fn random_predictor_reproduces_baseline_draw() {
    let m = reference_cohort();
    for feature in [Feature::Position, Feature::Cyst, Feature::Attenuation] {
        let set = join_predictions(&m, &random_predictor(&m, feature, 99), None).unwrap();
        let row = evaluate(&set, "all").rows.into_iter().find(|r| r.feature == feature).unwrap();
        let truth_only = join_predictions(&m, &oracle_predictor(&m), None).unwrap();
        let base = random_baseline(truth_only.column(feature).unwrap(), 1, 99).unwrap();
        assert_eq!(row.accuracy, Some(base.accuracy), "{feature}");
        assert_eq!(row.f1_or_mse, Some(base.f1), "{feature}");
        assert_eq!(row.auc, base.auc, "{feature}");
    }
}
