//! Evaluation per fold and aggregation across runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;
use std::path::Path;

use renalct::backend::GeneratedReport;
use renalct::metrics::{nlg_scores, MetricTable};
use renalct::predictor::{apply_score_thresholds, evaluate as score, join_predictions, parse_predictions, PredictionRow, PredictionSet};
use renalct::schema::{load_manifest, CohortManifest, Feature};
use renalct::split::FoldAssignment;

use crate::args::{EvaluateArgs, ReportArgs};
use crate::config::write_echo;
use crate::error::{CliError, ErrorKind};
use crate::util::{base_config, prepare_output, read_jsonl, write_text};

struct Reports {
    text: BTreeMap<String, String>,
    model: String,
}

fn load_reports(path: &Path) -> Result<Reports, CliError> {
    let rows: Vec<GeneratedReport> = read_jsonl(path)?;
    let model = rows.first().map_or_else(|| "model".to_string(), |r| r.model.clone());
    Ok(Reports {
        text: rows.into_iter().map(|r| (r.annotation_id, r.text)).collect(),
        model,
    })
}

fn fold_table(
    manifest: &CohortManifest,
    set: &PredictionSet,
    fold: &str,
    reports: Option<&Reports>,
) -> Result<MetricTable, CliError> {
    let mut table = score(set, fold);
    if let Some(reports) = reports {
        let mut cands = Vec::new();
        let mut refs = Vec::new();
        for id in &set.ids {
            if let (Some(c), Some(a)) = (reports.text.get(id), manifest.get(id)) {
                cands.push(c.as_str());
                refs.push(a.sentence.as_str());
            }
        }
        if cands.len() < set.ids.len() {
            tracing::warn!(fold, scored = cands.len(), expected = set.ids.len(), "reports missing for some annotations");
        }
        table.nlg = nlg_scores(&cands, &refs).ok();
    }
    Ok(table)
}

/// Cells that a strict run requires: every non-AUC cell of every categorical row,
/// the size MSE, and NLG scores when reports were given.
fn missing_cells(tables: &[MetricTable], want_nlg: bool) -> Vec<String> {
    let mut out = Vec::new();
    for t in tables {
        for r in &t.rows {
            let needed = if r.feature == Feature::Size {
                vec![("mse", r.f1_or_mse)]
            } else {
                vec![("accuracy", r.accuracy), ("precision", r.precision), ("recall", r.recall), ("f1", r.f1_or_mse)]
            };
            for (name, v) in needed {
                if v.is_none() {
                    out.push(format!("fold {} {} {name}", t.fold, r.feature.key()));
                }
            }
        }
        if want_nlg && t.nlg.is_none() {
            out.push(format!("fold {} nlg", t.fold));
        }
    }
    out
}

fn render_tables(tables: &[MetricTable], model: &str) -> String {
    let mut out = String::new();
    for t in tables {
        writeln!(out, "== fold {} ==", t.fold).unwrap();
        out.push_str(&t.features_text());
        if let Some(n) = t.nlg_text(model) {
            out.push('\n');
            out.push_str(&n);
        }
        out.push('\n');
    }
    out
}

fn write_tables(out: &Path, stem: &str, tables: &[MetricTable], model: &str) -> Result<(), CliError> {
    write_text(&out.join(format!("{stem}.json")), &(serde_json::to_string_pretty(tables).expect("tables serialize") + "\n"))?;
    write_text(&out.join(format!("{stem}_features.csv")), &MetricTable::features_csv(tables))?;
    if tables.iter().any(|t| t.nlg.is_some()) {
        write_text(&out.join(format!("{stem}_nlg.csv")), &MetricTable::nlg_csv(tables))?;
    }
    write_text(&out.join(format!("{stem}.txt")), &render_tables(tables, model))
}

fn strict_check(tables: &[MetricTable], want_nlg: bool) -> Result<(), CliError> {
    let missing = missing_cells(tables, want_nlg);
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(
            ErrorKind::NotComputable,
            format!("{} cells not computable: {}", missing.len(), missing.join("; ")),
        ))
    }
}

pub fn evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&args.common)?;
    if let Some(m) = &args.manifest {
        cfg.manifest = Some(m.clone());
    }
    cfg.metrics.strict |= args.strict;
    cfg.metrics.thresholds_from_training |= args.thresholds_from_training;
    let out = prepare_output(&cfg)?;
    let manifest = load_manifest(cfg.manifest_path()?)?;
    let text = std::fs::read_to_string(&args.predictions)
        .map_err(|e| CliError::data(format!("{}: {e}", args.predictions.display())))?;
    let rows: Vec<PredictionRow> = parse_predictions(&text)?;
    let reports = args.reports.as_deref().map(load_reports).transpose()?;

    let mut tables = Vec::new();
    let mut coverage = Vec::new();
    match &args.folds {
        Some(path) => {
            let folds = FoldAssignment::load(path)?;
            folds.check(&manifest)?;
            for f in 0..folds.k {
                let val: BTreeSet<&str> = folds.validation(f).into_iter().collect();
                let mut set = join_predictions(&manifest, &rows, Some(&val))?;
                if cfg.metrics.thresholds_from_training {
                    let train: BTreeSet<&str> = folds.training(f).into_iter().collect();
                    apply_score_thresholds(&mut set, &join_predictions(&manifest, &rows, Some(&train))?);
                }
                coverage.push((f.to_string(), set.coverage(), set.missing.clone()));
                tables.push(fold_table(&manifest, &set, &f.to_string(), reports.as_ref())?);
            }
            tables.push(MetricTable::mean(&tables));
        }
        None => {
            let set = join_predictions(&manifest, &rows, None)?;
            coverage.push(("all".to_string(), set.coverage(), set.missing.clone()));
            tables.push(fold_table(&manifest, &set, "all", reports.as_ref())?);
        }
    }

    let model = reports.as_ref().map_or("model", |r| r.model.as_str());
    write_tables(&out, "metrics", &tables, model)?;
    let mut cov = String::from("fold,coverage,missing\n");
    for (fold, c, missing) in &coverage {
        writeln!(cov, "{fold},{c:.6},{}", missing.join(" ")).unwrap();
    }
    write_text(&out.join("coverage.csv"), &cov)?;
    write_echo(&out, "evaluate", &cfg)?;
    if cfg.metrics.strict {
        strict_check(&tables, reports.is_some())?;
    }
    Ok(())
}

pub fn report(args: &ReportArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&args.common)?;
    cfg.metrics.strict |= args.strict;
    let out = prepare_output(&cfg)?;
    let mut folds = Vec::new();
    for dir in &args.inputs {
        let path = dir.join("metrics.json");
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let tables: Vec<MetricTable> =
            serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        folds.extend(tables.into_iter().filter(|t| t.fold != "mean"));
    }
    if folds.is_empty() {
        return Err(CliError::data("no fold tables in the given inputs"));
    }
    let mean = MetricTable::mean(&folds);
    let want_nlg = mean.nlg.is_some();
    write_tables(&out, "summary", std::slice::from_ref(&mean), "mean")?;
    write_echo(&out, "report", &cfg)?;
    if cfg.metrics.strict {
        strict_check(std::slice::from_ref(&mean), want_nlg)?;
    }
    Ok(())
}
