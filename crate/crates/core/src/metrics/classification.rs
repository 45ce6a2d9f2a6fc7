use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::NotComputable;
use crate::schema::Feature;

/// Ground truth and predictions for one feature.
///
/// `None` in `truth` is an unknown label and the row is excluded from
/// scoring. `None` in `pred` against a known truth is always wrong.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelColumn {
    pub feature: Feature,
    /// Known classes, in the order used by `scores`.
    pub classes: Vec<String>,
    pub truth: Vec<Option<String>>,
    pub pred: Vec<Option<String>>,
    /// One score per class for each row, when the predictor produced them.
    pub scores: Option<Vec<Vec<f64>>>,
}

impl LabelColumn {
    pub fn new(feature: Feature, truth: Vec<Option<String>>, pred: Vec<Option<String>>) -> Self {
        assert_eq!(truth.len(), pred.len(), "truth and prediction lengths differ");
        LabelColumn {
            feature,
            classes: feature.classes().iter().map(|c| c.to_string()).collect(),
            truth,
            pred,
            scores: None,
        }
    }

    /// Attaches per-class scores. Panics if the shape does not match.
    pub fn with_scores(mut self, scores: Vec<Vec<f64>>) -> Self {
        assert_eq!(scores.len(), self.truth.len(), "one score vector per row");
        assert!(
            scores.iter().all(|s| s.len() == self.classes.len()),
            "one score per class"
        );
        self.scores = Some(scores);
        self
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    fn scored_rows(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.truth.len()).filter(|&i| self.truth[i].is_some())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub scored: usize,
    /// Classes in the macro average (those present in the scored truth).
    pub classes: usize,
}

/// Accuracy and macro precision/recall/F1.
///
/// Only classes present in the scored truth enter the macro divisor. A class
/// with no predictions has precision 0. Per-class F1 values are averaged,
/// not recomputed from the averaged precision and recall.
pub fn classification_metrics(col: &LabelColumn) -> Result<ClassMetrics, NotComputable> {
    let rows: Vec<usize> = col.scored_rows().collect();
    if rows.is_empty() {
        return Err(NotComputable::new(format!(
            "{}: no rows with known ground truth",
            col.feature
        )));
    }

    let mut present: Vec<&str> = rows
        .iter()
        .filter_map(|&i| col.truth[i].as_deref())
        .collect();
    present.sort_unstable();
    present.dedup();

    let correct = rows
        .iter()
        .filter(|&&i| col.pred[i].is_some() && col.pred[i] == col.truth[i])
        .count();

    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for class in &present {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for &i in &rows {
            let t = col.truth[i].as_deref() == Some(class);
            let p = col.pred[i].as_deref() == Some(class);
            match (t, p) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => {}
            }
        }
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = tp as f64 / (tp + fn_) as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        p_sum += precision;
        r_sum += recall;
        f_sum += f1;
    }
    let k = present.len() as f64;
    Ok(ClassMetrics {
        accuracy: correct as f64 / rows.len() as f64,
        precision: p_sum / k,
        recall: r_sum / k,
        f1: f_sum / k,
        scored: rows.len(),
        classes: present.len(),
    })
}

/// Rank AUC: P(score_pos > score_neg) + ½·P(tie), over all pos/neg pairs.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, NotComputable> {
    assert_eq!(scores.len(), labels.len(), "scores and labels lengths differ");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(NotComputable::new("AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut k = 0;
    while k < order.len() {
        let mut end = k;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[k]] {
            end += 1;
        }
        let (mut gp, mut gn) = (0usize, 0usize);
        for &i in &order[k..=end] {
            if labels[i] {
                gp += 1;
            } else {
                gn += 1;
            }
        }
        wins += gp as f64 * neg_below as f64 + 0.5 * gp as f64 * gn as f64;
        neg_below += gn;
        k = end + 1;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Macro one-vs-rest AUC over classes with both positives and negatives.
///
/// `None` when the column carries no scores: AUC is only defined for
/// score-bearing predictions.
pub fn column_auc(col: &LabelColumn) -> Option<Result<f64, NotComputable>> {
    let scores = col.scores.as_ref()?;
    let rows: Vec<usize> = col.scored_rows().collect();
    let mut per_class = Vec::new();
    for (ci, class) in col.classes.iter().enumerate() {
        let labels: Vec<bool> = rows
            .iter()
            .map(|&i| col.truth[i].as_deref() == Some(class.as_str()))
            .collect();
        let s: Vec<f64> = rows.iter().map(|&i| scores[i][ci]).collect();
        if let Ok(a) = auc(&s, &labels) {
            per_class.push(a);
        }
    }
    Some(if per_class.is_empty() {
        Err(NotComputable::new(format!("{}: AUC needs both classes", col.feature)))
    } else {
        Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeError {
    pub mse: f64,
    /// Scored pairs over pairs with known truth.
    pub coverage: f64,
    pub scored: usize,
}

/// Mean squared error in cm² over pairs where both sizes are known.
pub fn size_mse(truth: &[Option<f64>], pred: &[Option<f64>]) -> Result<SizeError, NotComputable> {
    assert_eq!(truth.len(), pred.len(), "truth and prediction lengths differ");
    let known = truth.iter().filter(|t| t.is_some()).count();
    let pairs: Vec<(f64, f64)> = truth
        .iter()
        .zip(pred)
        .filter_map(|(t, p)| Some(((*t)?, (*p)?)))
        .collect();
    if pairs.is_empty() {
        return Err(NotComputable::new("size: no pairs with both sizes known"));
    }
    let mse = pairs.iter().map(|(t, p)| (t - p).powi(2)).sum::<f64>() / pairs.len() as f64;
    Ok(SizeError {
        mse,
        coverage: pairs.len() as f64 / known as f64,
        scored: pairs.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub auc: Option<f64>,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub trials: usize,
}

/// Uniform random predictor averaged over `trials` draws.
///
/// Each trial predicts a class uniformly from the feature's known classes and
/// draws every per-class score uniformly on [0, 1]. Only the truth of `col`
/// is used.
pub fn random_baseline(col: &LabelColumn, trials: usize, seed: u64) -> Result<BaselineRow, NotComputable> {
    assert!(trials >= 1, "trials must be at least 1");
    if col.classes.is_empty() {
        return Err(NotComputable::new(format!("{}: no classes", col.feature)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = col.classes.len();
    let n = col.len();
    let (mut acc, mut p, mut r, mut f) = (0.0, 0.0, 0.0, 0.0);
    let (mut auc_sum, mut auc_n) = (0.0, 0usize);

    for _ in 0..trials {
        let pred: Vec<Option<String>> = (0..n)
            .map(|_| Some(col.classes[rng.gen_range(0..k)].clone()))
            .collect();
        let scores: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.gen::<f64>()).collect()).collect();
        let trial = LabelColumn {
            feature: col.feature,
            classes: col.classes.clone(),
            truth: col.truth.clone(),
            pred,
            scores: Some(scores),
        };
        let m = classification_metrics(&trial)?;
        acc += m.accuracy;
        p += m.precision;
        r += m.recall;
        f += m.f1;
        if let Some(Ok(a)) = column_auc(&trial) {
            auc_sum += a;
            auc_n += 1;
        }
    }
    let t = trials as f64;
    Ok(BaselineRow {
        auc: (auc_n > 0).then(|| auc_sum / auc_n as f64),
        accuracy: acc / t,
        precision: p / t,
        recall: r / t,
        f1: f / t,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn strings(v: &[&str]) -> Vec<Option<String>> {
        v.iter().map(|s| Some(s.to_string())).collect()
    }

    fn binary(truth: &[&str], pred: &[&str]) -> LabelColumn {
        LabelColumn::new(Feature::Cyst, strings(truth), strings(pred))
    }

    #[test]
    fn perfect_predictions() {
        let c = binary(&["true", "false", "true"], &["true", "false", "true"]);
        let m = classification_metrics(&c).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn hand_confusion_matrix() {
        let c = binary(&["true", "true", "false", "false"], &["true", "false", "false", "false"]);
        let m = classification_metrics(&c).unwrap();
        assert_abs_diff_eq!(m.accuracy, 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(m.precision, 0.8333333333, epsilon = 1e-9);
        assert_abs_diff_eq!(m.recall, 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(m.f1, 0.7333333333, epsilon = 1e-9);
    }

    #[test]
    fn single_class_truth_uses_present_classes_only() {
        let c = binary(&["true", "true", "true", "true"], &["true", "true", "false", "true"]);
        let m = classification_metrics(&c).unwrap();
        assert_eq!(m.classes, 1);
        assert_abs_diff_eq!(m.recall, 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(m.precision, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn unknown_truth_excluded_and_unknown_pred_is_wrong() {
        let c = LabelColumn::new(
            Feature::Position,
            vec![Some("left".into()), None, Some("right".into())],
            vec![Some("left".into()), Some("right".into()), None],
        );
        let m = classification_metrics(&c).unwrap();
        assert_eq!(m.scored, 2);
        assert_abs_diff_eq!(m.accuracy, 0.5, epsilon = 1e-12);
        // left: P=1 R=1; right: no predictions, P=0 R=0
        assert_abs_diff_eq!(m.precision, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(m.recall, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn all_unknown_truth_not_computable() {
        let c = LabelColumn::new(Feature::Enhancement, vec![None, None], vec![None, None]);
        assert!(classification_metrics(&c).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.3, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.3, 0.2], &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn column_auc_absent_without_scores() {
        let c = binary(&["true", "false"], &["true", "false"]);
        assert!(column_auc(&c).is_none());
        let scored = c.with_scores(vec![vec![0.8, 0.2], vec![0.3, 0.7]]);
        assert_eq!(column_auc(&scored).unwrap().unwrap(), 1.0);
    }

    #[test]
    fn size_examples() {
        let e = size_mse(&[Some(2.0)], &[Some(2.0)]).unwrap();
        assert_eq!((e.mse, e.coverage), (0.0, 1.0));
        let e = size_mse(&[Some(1.0), Some(3.0)], &[Some(2.0), None]).unwrap();
        assert_eq!((e.mse, e.coverage), (1.0, 0.5));
        assert!(size_mse(&[None, Some(1.0)], &[Some(1.0), None]).is_err());
    }

    #[test]
    fn baseline_single_class_accuracy_is_one_over_k() {
        let truth = vec![Some("hypoattenuating".to_string()); 60];
        let c = LabelColumn::new(Feature::Attenuation, truth, vec![None; 60]);
        let row = random_baseline(&c, 2000, 3).unwrap();
        assert_abs_diff_eq!(row.accuracy, 1.0 / 3.0, epsilon = 0.01);
        assert!(row.auc.is_none());
    }

    #[test]
    fn baseline_is_deterministic() {
        let c = binary(&["true", "false", "true", "false"], &["true"; 4]);
        assert_eq!(random_baseline(&c, 50, 9).unwrap(), random_baseline(&c, 50, 9).unwrap());
    }
}
