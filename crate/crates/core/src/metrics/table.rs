use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::NlgScores;
use crate::schema::Feature;

/// One feature row. `None` cells are not computable and render as `--`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub feature: Feature,
    pub auc: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// Macro F1 for categorical features, MSE (cm²) for size.
    pub f1_or_mse: Option<f64>,
    /// Size only: scored pairs over pairs with known truth.
    pub coverage: Option<f64>,
    pub scored: usize,
}

impl FeatureRow {
    pub fn empty(feature: Feature) -> Self {
        FeatureRow {
            feature,
            auc: None,
            accuracy: None,
            precision: None,
            recall: None,
            f1_or_mse: None,
            coverage: None,
            scored: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    /// Fold index as text, `all` for an unsplit evaluation, `mean` for an aggregate.
    pub fold: String,
    pub rows: Vec<FeatureRow>,
    pub nlg: Option<NlgScores>,
}

fn cell(v: Option<f64>, places: usize) -> String {
    match v {
        Some(x) => format!("{x:.places$}"),
        None => "--".to_string(),
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

impl MetricTable {
    pub fn row(&self, feature: Feature) -> Option<&FeatureRow> {
        self.rows.iter().find(|r| r.feature == feature)
    }

    /// Cell-wise mean over folds; a cell is averaged over the folds where it
    /// was computable and stays `None` if it never was.
    pub fn mean(tables: &[MetricTable]) -> MetricTable {
        let mut rows = Vec::new();
        for feature in Feature::ALL {
            let per_fold: Vec<&FeatureRow> = tables.iter().filter_map(|t| t.row(feature)).collect();
            if per_fold.is_empty() {
                continue;
            }
            rows.push(FeatureRow {
                feature,
                auc: mean_of(per_fold.iter().map(|r| r.auc)),
                accuracy: mean_of(per_fold.iter().map(|r| r.accuracy)),
                precision: mean_of(per_fold.iter().map(|r| r.precision)),
                recall: mean_of(per_fold.iter().map(|r| r.recall)),
                f1_or_mse: mean_of(per_fold.iter().map(|r| r.f1_or_mse)),
                coverage: mean_of(per_fold.iter().map(|r| r.coverage)),
                scored: per_fold.iter().map(|r| r.scored).sum(),
            });
        }
        let nlg: Vec<&NlgScores> = tables.iter().filter_map(|t| t.nlg.as_ref()).collect();
        let nlg = (!nlg.is_empty()).then(|| {
            let n = nlg.len() as f64;
            NlgScores {
                bleu1: nlg.iter().map(|s| s.bleu1).sum::<f64>() / n,
                bleu4: nlg.iter().map(|s| s.bleu4).sum::<f64>() / n,
                rouge_l: nlg.iter().map(|s| s.rouge_l).sum::<f64>() / n,
                meteor: nlg.iter().map(|s| s.meteor).sum::<f64>() / n,
            }
        });
        MetricTable {
            fold: "mean".to_string(),
            rows,
            nlg,
        }
    }

    pub const CSV_HEADER: &'static str = "fold,feature,auc,accuracy,precision,recall,f1_mse,coverage,scored";
    pub const NLG_CSV_HEADER: &'static str = "fold,bleu1,bleu4,rouge_l,meteor";

    /// Feature rows of several tables as CSV.
    pub fn features_csv(tables: &[MetricTable]) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for t in tables {
            for r in &t.rows {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    t.fold,
                    r.feature.label(),
                    cell(r.auc, 6),
                    cell(r.accuracy, 6),
                    cell(r.precision, 6),
                    cell(r.recall, 6),
                    cell(r.f1_or_mse, 6),
                    cell(r.coverage, 6),
                    r.scored
                )
                .unwrap();
            }
        }
        out
    }

    pub fn nlg_csv(tables: &[MetricTable]) -> String {
        let mut out = String::from(Self::NLG_CSV_HEADER);
        out.push('\n');
        for t in tables {
            if let Some(s) = &t.nlg {
                writeln!(
                    out,
                    "{},{:.6},{:.6},{:.6},{:.6}",
                    t.fold, s.bleu1, s.bleu4, s.rouge_l, s.meteor
                )
                .unwrap();
            }
        }
        out
    }

    /// Feature table in the layout Feature | AUC | Accuracy | Precision | Recall | F1 / MSE.
    pub fn features_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<12} {:>8} {:>9} {:>10} {:>8} {:>9}",
            "Feature", "AUC", "Accuracy", "Precision", "Recall", "F1 / MSE"
        )
        .unwrap();
        for r in &self.rows {
            writeln!(
                out,
                "{:<12} {:>8} {:>9} {:>10} {:>8} {:>9}",
                r.feature.label(),
                cell(r.auc, 4),
                cell(r.accuracy, 4),
                cell(r.precision, 4),
                cell(r.recall, 4),
                cell(r.f1_or_mse, 4)
            )
            .unwrap();
        }
        out
    }

    /// NLG block in the layout BLEU-1 | BLEU-4 | ROUGE-L | METEOR.
    pub fn nlg_text(&self, model: &str) -> Option<String> {
        let s = self.nlg.as_ref()?;
        let mut out = String::new();
        writeln!(out, "{:<24} {:>7} {:>7} {:>7} {:>7}", "Model", "BLEU-1", "BLEU-4", "ROUGE-L", "METEOR").unwrap();
        writeln!(
            out,
            "{:<24} {:>7.3} {:>7.3} {:>7.3} {:>7.3}",
            model, s.bleu1, s.bleu4, s.rouge_l, s.meteor
        )
        .unwrap();
        Some(out)
    }
}
