//! Prediction files: the boundary where external detectors feed evaluation.
//!
//! One JSON object per line:
//!
//! ```json
//! {"annotation_id":"ph-0001","features":{...FeatureSet...},"scores":{"cyst":{"true":0.8,"false":0.2}}}
//! ```
//!
//! `scores` is optional and keyed by feature, then class token. Scores must lie
//! in [0, 1]. Unless the row sets `"raw_scores": true`, each feature's scores
//! must also sum to 1 ± 0.01. AUC is reported only for features where every
//! joined row carries scores.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::ExtractionResult;
use crate::metrics::{classification_metrics, column_auc, size_mse, FeatureRow, LabelColumn, MetricTable};
use crate::schema::{Attenuation, CohortManifest, Enhancement, Feature, FeatureSet, Growth, Position};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub annotation_id: String,
    pub features: FeatureSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<BTreeMap<Feature, BTreeMap<String, f64>>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub raw_scores: bool,
}

impl PredictionRow {
    pub fn from_features(annotation_id: &str, features: FeatureSet) -> Self {
        PredictionRow {
            annotation_id: annotation_id.to_string(),
            features,
            scores: None,
            raw_scores: false,
        }
    }
}

impl From<&ExtractionResult> for PredictionRow {
    fn from(r: &ExtractionResult) -> Self {
        PredictionRow::from_features(&r.annotation_id, r.features.clone())
    }
}

#[derive(Debug, Error)]
pub enum PredictionError {
    #[error("prediction file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate annotation_id {0}")]
    DuplicateId(String),
    #[error("annotation_id {0} is not in the manifest")]
    UnknownId(String),
    #[error("{id}: {feature} score for {class:?} is {value}, outside [0, 1]")]
    ScoreRange {
        id: String,
        feature: Feature,
        class: String,
        value: f64,
    },
    #[error("{id}: {feature} scores sum to {sum}; mark the row raw_scores if these are ranks")]
    ScoreSum { id: String, feature: Feature, sum: f64 },
    #[error("{id}: {feature} has no class {class:?}")]
    UnknownClass { id: String, feature: Feature, class: String },
    #[error("{feature}: invalid constant value {value:?}")]
    BadConstant { feature: Feature, value: String },
}

fn check_row(row: &PredictionRow) -> Result<(), PredictionError> {
    let Some(scores) = &row.scores else { return Ok(()) };
    for (&feature, per_class) in scores {
        for (class, &value) in per_class {
            if !feature.classes().contains(&class.as_str()) {
                return Err(PredictionError::UnknownClass {
                    id: row.annotation_id.clone(),
                    feature,
                    class: class.clone(),
                });
            }
            if !(0.0..=1.0).contains(&value) {
                return Err(PredictionError::ScoreRange {
                    id: row.annotation_id.clone(),
                    feature,
                    class: class.clone(),
                    value,
                });
            }
        }
        let sum: f64 = per_class.values().sum();
        if !row.raw_scores && !(0.99..=1.01).contains(&sum) {
            return Err(PredictionError::ScoreSum {
                id: row.annotation_id.clone(),
                feature,
                sum,
            });
        }
    }
    Ok(())
}

pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRow>, PredictionError> {
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: PredictionRow = serde_json::from_str(line).map_err(|e| PredictionError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        check_row(&row)?;
        if !seen.insert(row.annotation_id.clone()) {
            return Err(PredictionError::DuplicateId(row.annotation_id));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn predictions_to_string(rows: &[PredictionRow]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("prediction rows serialize") + "\n")
        .collect()
}

pub fn save_predictions(rows: &[PredictionRow], path: impl AsRef<Path>) -> Result<(), PredictionError> {
    fs::write(path, predictions_to_string(rows))?;
    Ok(())
}

/// Predictions joined to ground truth, one column per feature.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    /// Categorical columns in schema order.
    pub columns: Vec<LabelColumn>,
    pub size_truth: Vec<Option<f64>>,
    pub size_pred: Vec<Option<f64>>,
    /// Ids of the joined rows, aligned with every column.
    pub ids: Vec<String>,
    /// Expected ids with no prediction row.
    pub missing: Vec<String>,
    pub warnings: Vec<String>,
}

impl PredictionSet {
    pub fn column(&self, feature: Feature) -> Option<&LabelColumn> {
        self.columns.iter().find(|c| c.feature == feature)
    }

    /// Joined rows over expected rows.
    pub fn coverage(&self) -> f64 {
        let expected = self.ids.len() + self.missing.len();
        if expected == 0 {
            0.0
        } else {
            self.ids.len() as f64 / expected as f64
        }
    }
}

/// Joins `rows` to `manifest` on annotation_id, restricted to `subset` when given.
pub fn join_predictions(
    manifest: &CohortManifest,
    rows: &[PredictionRow],
    subset: Option<&BTreeSet<&str>>,
) -> Result<PredictionSet, PredictionError> {
    let mut by_id: BTreeMap<&str, &PredictionRow> = BTreeMap::new();
    for r in rows {
        if manifest.get(&r.annotation_id).is_none() {
            return Err(PredictionError::UnknownId(r.annotation_id.clone()));
        }
        if by_id.insert(r.annotation_id.as_str(), r).is_some() {
            return Err(PredictionError::DuplicateId(r.annotation_id.clone()));
        }
    }
    let mut ids = Vec::new();
    let mut missing = Vec::new();
    let mut pairs = Vec::new();
    for a in &manifest.annotations {
        if subset.is_some_and(|s| !s.contains(a.annotation_id.as_str())) {
            continue;
        }
        match by_id.get(a.annotation_id.as_str()) {
            Some(r) => {
                ids.push(a.annotation_id.clone());
                pairs.push((&a.features, *r));
            }
            None => missing.push(a.annotation_id.clone()),
        }
    }
    let mut warnings = Vec::new();
    if !missing.is_empty() {
        let msg = format!("{} annotations have no prediction: {}", missing.len(), missing.join(", "));
        tracing::warn!("{msg}");
        warnings.push(msg);
    }

    let mut columns = Vec::new();
    for feature in Feature::CATEGORICAL {
        let truth = pairs.iter().map(|(t, _)| t.token(feature).map(str::to_string)).collect();
        let pred = pairs.iter().map(|(_, p)| p.features.token(feature).map(str::to_string)).collect();
        let mut col = LabelColumn::new(feature, truth, pred);
        let with_scores = pairs
            .iter()
            .filter(|(_, p)| p.scores.as_ref().is_some_and(|s| s.contains_key(&feature)))
            .count();
        if with_scores > 0 && with_scores == pairs.len() {
            let scores = pairs
                .iter()
                .map(|(_, p)| {
                    let s = &p.scores.as_ref().expect("checked")[&feature];
                    col.classes.iter().map(|c| s.get(c).copied().unwrap_or(0.0)).collect()
                })
                .collect();
            col = col.with_scores(scores);
        } else if with_scores > 0 {
            warnings.push(format!(
                "{feature}: only {with_scores} of {} rows carry scores; AUC omitted",
                pairs.len()
            ));
        }
        columns.push(col);
    }
    Ok(PredictionSet {
        columns,
        size_truth: pairs.iter().map(|(t, _)| t.size_cm).collect(),
        size_pred: pairs.iter().map(|(_, p)| p.features.size_cm).collect(),
        ids,
        missing,
        warnings,
    })
}

pub fn load_predictions(path: impl AsRef<Path>, manifest: &CohortManifest) -> Result<PredictionSet, PredictionError> {
    let rows = parse_predictions(&fs::read_to_string(path)?)?;
    join_predictions(manifest, &rows, None)
}

/// Metric table for a joined set. Cells that cannot be computed stay empty.
pub fn evaluate(set: &PredictionSet, fold: &str) -> MetricTable {
    let mut rows = Vec::new();
    for col in &set.columns {
        let mut row = FeatureRow::empty(col.feature);
        if let Ok(m) = classification_metrics(col) {
            row.accuracy = Some(m.accuracy);
            row.precision = Some(m.precision);
            row.recall = Some(m.recall);
            row.f1_or_mse = Some(m.f1);
            row.scored = m.scored;
        }
        row.auc = column_auc(col).and_then(Result::ok);
        rows.push(row);
    }
    let mut size = FeatureRow::empty(Feature::Size);
    if let Ok(e) = size_mse(&set.size_truth, &set.size_pred) {
        size.f1_or_mse = Some(e.mse);
        size.coverage = Some(e.coverage);
        size.scored = e.scored;
    }
    rows.push(size);
    MetricTable {
        fold: fold.to_string(),
        rows,
        nlg: None,
    }
}

/// Threshold on the first-class score that maximizes F1 for that class.
/// Ties go to the highest threshold. `None` without positives.
pub fn max_f1_threshold(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let p = positive.iter().filter(|&&b| b).count();
    if p == 0 {
        return None;
    }
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.sort_by(|a, b| b.total_cmp(a));
    candidates.dedup();
    let mut best: Option<(f64, f64)> = None;
    for &t in &candidates {
        let tp = scores.iter().zip(positive).filter(|&(&s, &y)| s >= t && y).count() as f64;
        let fp = scores.iter().zip(positive).filter(|&(&s, &y)| s >= t && !y).count() as f64;
        let f1 = 2.0 * tp / (2.0 * tp + fp + (p as f64 - tp));
        if best.is_none_or(|(bf, _)| f1 > bf) {
            best = Some((f1, t));
        }
    }
    best.map(|(_, t)| t)
}

/// Replaces the label predictions of every score-bearing binary column in
/// `eval` with thresholded scores, the threshold fitted on `train` at max F1.
/// Meant for score-only files such as one-class detectors. The threshold
/// applies to the first class.
pub fn apply_score_thresholds(eval: &mut PredictionSet, train: &PredictionSet) {
    for col in &mut eval.columns {
        if col.classes.len() != 2 {
            continue;
        }
        let (Some(scores), Some(tcol)) = (col.scores.as_ref(), train.column(col.feature)) else {
            continue;
        };
        let Some(tscores) = tcol.scores.as_ref() else { continue };
        let known: Vec<usize> = (0..tcol.len()).filter(|&i| tcol.truth[i].is_some()).collect();
        let s: Vec<f64> = known.iter().map(|&i| tscores[i][0]).collect();
        let y: Vec<bool> = known.iter().map(|&i| tcol.truth[i].as_deref() == Some(tcol.classes[0].as_str())).collect();
        let Some(t) = max_f1_threshold(&s, &y) else { continue };
        col.pred = scores
            .iter()
            .map(|s| Some(col.classes[if s[0] >= t { 0 } else { 1 }].clone()))
            .collect();
    }
}

fn set_token(f: &mut FeatureSet, feature: Feature, value: &str) -> Option<()> {
    match feature {
        Feature::Position => f.position = value.parse::<Position>().ok()?,
        Feature::Exophytic => f.exophytic = value.parse::<Growth>().ok()?,
        Feature::Attenuation => f.attenuation = value.parse::<Attenuation>().ok()?,
        Feature::Enhancement => f.enhancement = value.parse::<Enhancement>().ok()?,
        Feature::Cyst => f.cyst = value.parse().ok()?,
        Feature::Mass => f.mass = value.parse().ok()?,
        Feature::Tumor => f.tumor = value.parse().ok()?,
        Feature::Size => {
            let x: f64 = value.parse().ok()?;
            (x.is_finite() && x > 0.0).then_some(())?;
            f.size_cm = Some(x);
        }
    }
    Some(())
}

/// Every row predicts `value` for `feature`; other features stay unknown.
pub fn constant_predictor(
    manifest: &CohortManifest,
    feature: Feature,
    value: &str,
) -> Result<Vec<PredictionRow>, PredictionError> {
    let mut f = FeatureSet::unknown();
    set_token(&mut f, feature, value).ok_or_else(|| PredictionError::BadConstant {
        feature,
        value: value.to_string(),
    })?;
    Ok(manifest
        .annotations
        .iter()
        .map(|a| PredictionRow::from_features(&a.annotation_id, f.clone()))
        .collect())
}

/// One uniform random draw for `feature`: a class per row, then one raw
/// uniform score per class per row, from a ChaCha8 stream seeded with `seed`.
pub fn random_predictor(manifest: &CohortManifest, feature: Feature, seed: u64) -> Vec<PredictionRow> {
    let classes = feature.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<&str> = manifest
        .annotations
        .iter()
        .map(|_| classes[rng.gen_range(0..classes.len())])
        .collect();
    let scores: Vec<BTreeMap<String, f64>> = manifest
        .annotations
        .iter()
        .map(|_| classes.iter().map(|c| (c.to_string(), rng.gen::<f64>())).collect())
        .collect();
    manifest
        .annotations
        .iter()
        .zip(picks.into_iter().zip(scores))
        .map(|(a, (pick, s))| {
            let mut f = FeatureSet::unknown();
            set_token(&mut f, feature, pick).expect("class tokens parse");
            PredictionRow {
                annotation_id: a.annotation_id.clone(),
                features: f,
                scores: Some(BTreeMap::from([(feature, s)])),
                raw_scores: true,
            }
        })
        .collect()
}

/// Ground truth restated as predictions.
pub fn oracle_predictor(manifest: &CohortManifest) -> Vec<PredictionRow> {
    manifest
        .annotations
        .iter()
        .map(|a| PredictionRow::from_features(&a.annotation_id, a.features.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{Annotation, Provenance, SliceRef};

    fn manifest(n: usize) -> CohortManifest {
        let annotations = (0..n)
            .map(|i| Annotation {
                annotation_id: format!("a{i}"),
                patient_id: format!("p{i}"),
                report_id: format!("r{i}"),
                sentence: "s".into(),
                slice: SliceRef::coronal(1, 1),
                features: FeatureSet {
                    position: if i % 2 == 0 { Position::Left } else { Position::Right },
                    size_cm: Some(1.0 + i as f64),
                    cyst: i % 3 == 0,
                    ..FeatureSet::unknown()
                },
                split_fold: None,
            })
            .collect();
        CohortManifest::new(Provenance::Phantom, annotations)
    }

    #[test]
    fn oracle_predictions_score_perfectly() {
        let m = manifest(12);
        let set = join_predictions(&m, &oracle_predictor(&m), None).unwrap();
        let t = evaluate(&set, "all");
        for feature in [Feature::Position, Feature::Cyst, Feature::Mass, Feature::Tumor] {
            assert_eq!(t.row(feature).unwrap().f1_or_mse, Some(1.0), "{feature}");
            assert_eq!(t.row(feature).unwrap().auc, None);
        }
        assert_eq!(t.row(Feature::Exophytic).unwrap().accuracy, None);
        let size = t.row(Feature::Size).unwrap();
        assert_eq!((size.f1_or_mse, size.coverage), (Some(0.0), Some(1.0)));
    }

    #[test]
    fn missing_rows_are_reported() {
        let m = manifest(10);
        let rows: Vec<PredictionRow> = oracle_predictor(&m).into_iter().skip(3).collect();
        let set = join_predictions(&m, &rows, None).unwrap();
        assert_eq!(set.missing, vec!["a0", "a1", "a2"]);
        assert!((set.coverage() - 0.7).abs() < 1e-12);
        assert_eq!(set.warnings.len(), 1);
    }

    #[test]
    fn invalid_files_are_rejected() {
        let m = manifest(2);
        let row = |id: &str| PredictionRow::from_features(id, FeatureSet::unknown());
        assert!(matches!(join_predictions(&m, &[row("a0"), row("a0")], None), Err(PredictionError::DuplicateId(_))));
        assert!(matches!(join_predictions(&m, &[row("zz")], None), Err(PredictionError::UnknownId(_))));
        let bad = r#"{"annotation_id":"a0","features":{"position":"left","exophytic":"unknown","attenuation":"unknown","enhancement":"unknown"},"scores":{"cyst":{"true":1.5,"false":0.0}}}"#;
        assert!(matches!(parse_predictions(bad), Err(PredictionError::ScoreRange { .. })));
        let unnormalized = bad.replace("1.5", "0.5");
        assert!(matches!(parse_predictions(&unnormalized), Err(PredictionError::ScoreSum { .. })));
        let flagged = unnormalized.replace("}}}", "}},\"raw_scores\":true}");
        assert_eq!(parse_predictions(&flagged).unwrap().len(), 1);
    }

    #[test]
    fn constant_predictor_accuracy() {
        let m = manifest(12);
        let set = join_predictions(&m, &constant_predictor(&m, Feature::Cyst, "true").unwrap(), None).unwrap();
        let acc = evaluate(&set, "all").row(Feature::Cyst).unwrap().accuracy.unwrap();
        assert!((acc - 4.0 / 12.0).abs() < 1e-12);
        assert!(constant_predictor(&m, Feature::Cyst, "maybe").is_err());
        assert!(constant_predictor(&CohortManifest::new(Provenance::Phantom, vec![]), Feature::Cyst, "true")
            .unwrap()
            .is_empty());
    }

    #[test]
    fn thresholds_from_training_scores() {
        assert_eq!(max_f1_threshold(&[0.9, 0.8, 0.3, 0.2], &[true, true, false, false]), Some(0.8));
        assert_eq!(max_f1_threshold(&[0.1, 0.2], &[false, false]), None);
        let m = manifest(8);
        let rows: Vec<PredictionRow> = m
            .annotations
            .iter()
            .map(|a| {
                let s = if a.features.cyst { 0.9 } else { 0.2 };
                PredictionRow {
                    annotation_id: a.annotation_id.clone(),
                    features: FeatureSet::unknown(),
                    scores: Some(BTreeMap::from([(
                        Feature::Cyst,
                        BTreeMap::from([("true".to_string(), s), ("false".to_string(), 1.0 - s)]),
                    )])),
                    raw_scores: false,
                }
            })
            .collect();
        let train = join_predictions(&m, &rows, None).unwrap();
        let mut eval = train.clone();
        apply_score_thresholds(&mut eval, &train);
        let t = evaluate(&eval, "0");
        assert_eq!(t.row(Feature::Cyst).unwrap().f1_or_mse, Some(1.0));
        assert_eq!(t.row(Feature::Cyst).unwrap().auc, Some(1.0));
    }
}
