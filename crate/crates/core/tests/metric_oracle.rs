//! Golden metric table: values computed by the brute-force oracle in
//! `tests/oracle`, frozen in `tests/golden/metric_oracle.json`, and checked
//! against the implementation.
//!
//! Regenerate with `REGENERATE_GOLDEN=1 cargo test -p renalct-core --test metric_oracle`.

mod oracle;

use std::path::PathBuf;

use renalct::metrics::{self, LabelColumn};
use renalct::schema::Feature;
use serde::{Deserialize, Serialize};

pub const CORPUS: [(&str, &str); 20] = [
    (
        "There is a 1.78 cm exophytic hypoattenuating lesion in the left kidney.",
        "There is a 1.78 cm exophytic hypoattenuating lesion in the left kidney.",
    ),
    ("the the the the", "the cat"),
    ("the cat sat", "the cat"),
    ("Left renal cyst.", "Simple cyst in the left kidney."),
    (
        "A 2 cm enhancing mass in the right kidney, suspicious for RCC.",
        "Enhancement of the right renal mass measuring 2 cm is concerning for carcinoma.",
    ),
    ("No renal abnormality.", "Hepatic steatosis without focal lesion."),
    (
        "Bilateral renal cysts, the largest measuring 3.2 cm.",
        "Multiple bilateral renal cysts, largest 3.2 x 2.8 cm in the left kidney.",
    ),
    (
        "Hyperdense cyst in the right kidney.",
        "A hyperattenuating cyst in the right kidney, likely hemorrhagic.",
    ),
    ("Kidney lesion", "lesion kidney"),
    ("complex cystic mass of the left kidney", "left kidney complex cystic mass"),
    ("Enhancing lesions enhance.", "The lesion enhances."),
    (
        "Subcentimeter hypodense lesion, too small to characterize.",
        "Subcentimeter hypodense lesion in the right kidney, too small to characterize.",
    ),
    ("The mass is exophytic.", "Exophytic mass."),
    ("there is a cyst there is a cyst", "there is a cyst"),
    (
        "Right kidney: 4.1 cm solid mass.",
        "Right kidney: There is a 4.1 cm solid enhancing mass concerning for tumor.",
    ),
    ("cyst", "cyst"),
    ("Nonenhancing cyst.", "Non-enhancing cyst."),
    (
        "The left kidney demonstrates a small cyst.",
        "A small cyst is demonstrated in the left kidney.",
    ),
    ("mass mass cyst", "cyst mass"),
    (
        "Interpolar right renal lesion measuring 1.4 cm, indeterminate.",
        "Indeterminate 1.4 cm lesion in the interpolar region of the right kidney.",
    ),
];

pub const CLASS_TRUTH: [&str; 20] = [
    "hypoattenuating", "hypoattenuating", "hypoattenuating", "hypoattenuating", "hypoattenuating",
    "hypoattenuating", "hypoattenuating", "hyperattenuating", "hyperattenuating", "hyperattenuating",
    "hyperattenuating", "hyperattenuating", "isoattenuating", "isoattenuating", "isoattenuating",
    "hypoattenuating", "hyperattenuating", "hypoattenuating", "isoattenuating", "hyperattenuating",
];

pub const CLASS_PRED: [Option<&str>; 20] = [
    Some("hypoattenuating"), Some("hypoattenuating"), Some("hyperattenuating"), Some("hypoattenuating"), None,
    Some("hypoattenuating"), Some("isoattenuating"), Some("hyperattenuating"), Some("hyperattenuating"), Some("hypoattenuating"),
    Some("hyperattenuating"), None, Some("isoattenuating"), Some("hypoattenuating"), Some("hyperattenuating"),
    Some("hypoattenuating"), Some("hyperattenuating"), Some("hypoattenuating"), Some("isoattenuating"), Some("isoattenuating"),
];

pub const AUC_SCORES: [f64; 20] = [
    0.91, 0.85, 0.85, 0.80, 0.77, 0.70, 0.70, 0.70, 0.64, 0.60,
    0.55, 0.51, 0.50, 0.45, 0.40, 0.40, 0.33, 0.30, 0.22, 0.10,
];

pub const AUC_LABELS: [bool; 20] = [
    true, true, false, true, true, false, true, false, true, false,
    true, false, false, true, false, false, false, true, false, false,
];

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct PairRow {
    pub candidate: String,
    pub reference: String,
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Golden {
    pub tokenizer: String,
    pub pairs: Vec<PairRow>,
    pub corpus_bleu1: f64,
    pub corpus_bleu4: f64,
    pub mean_rouge_l: f64,
    pub mean_meteor: f64,
    pub class_truth: Vec<String>,
    pub class_pred: Vec<Option<String>>,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub auc_scores: Vec<f64>,
    pub auc_labels: Vec<bool>,
    pub auc: f64,
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/metric_oracle.json")
}

fn compute_with_oracle() -> Golden {
    let pairs: Vec<PairRow> = CORPUS
        .iter()
        .map(|(c, r)| PairRow {
            candidate: c.to_string(),
            reference: r.to_string(),
            bleu1: oracle::bleu(&[c], &[r], 1),
            bleu4: oracle::bleu(&[c], &[r], 4),
            rouge_l: oracle::rouge_l(c, r),
            meteor: oracle::meteor(c, r),
        })
        .collect();
    let cands: Vec<&str> = CORPUS.iter().map(|p| p.0).collect();
    let refs: Vec<&str> = CORPUS.iter().map(|p| p.1).collect();
    let n = pairs.len() as f64;
    let (accuracy, macro_precision, macro_recall, macro_f1) = oracle::macro_prf(&CLASS_TRUTH, &CLASS_PRED);
    Golden {
        tokenizer: metrics::TOKENIZER_VERSION.to_string(),
        corpus_bleu1: oracle::bleu(&cands, &refs, 1),
        corpus_bleu4: oracle::bleu(&cands, &refs, 4),
        mean_rouge_l: pairs.iter().map(|p| p.rouge_l).sum::<f64>() / n,
        mean_meteor: pairs.iter().map(|p| p.meteor).sum::<f64>() / n,
        pairs,
        class_truth: CLASS_TRUTH.iter().map(|s| s.to_string()).collect(),
        class_pred: CLASS_PRED.iter().map(|p| p.map(str::to_string)).collect(),
        accuracy,
        macro_precision,
        macro_recall,
        macro_f1,
        auc_scores: AUC_SCORES.to_vec(),
        auc_labels: AUC_LABELS.to_vec(),
        auc: oracle::auc(&AUC_SCORES, &AUC_LABELS),
    }
}

fn load_golden() -> Golden {
    let text = std::fs::read_to_string(golden_path()).expect("golden table present");
    serde_json::from_str(&text).expect("golden table parses")
}

#[test]
fn golden_table_matches_oracle() {
    let fresh = compute_with_oracle();
    if std::env::var_os("REGENERATE_GOLDEN").is_some() {
        let text = serde_json::to_string_pretty(&fresh).unwrap();
        std::fs::write(golden_path(), text + "\n").unwrap();
    }
    assert_eq!(load_golden(), fresh);
}

#[test]
fn oracle_agrees_with_hand_examples() {
    // clipped unigram count min(4, 1) over 4 candidate tokens; c >= r so no brevity penalty
    assert!((oracle::bleu(&["the the the the"], &["the cat"], 1) - 0.25).abs() < 1e-15);
    assert!((oracle::rouge_l("the cat sat", "the cat") - 0.8).abs() < 1e-15);
    assert!((oracle::meteor("a b c d", "a b c d") - 0.9921875).abs() < 1e-15);
    assert!((oracle::meteor("cyst", "cyst") - 0.5).abs() < 1e-15);
    let (acc, p, r, f) = oracle::macro_prf(&["1", "1", "0", "0"], &[Some("1"), Some("0"), Some("0"), Some("0")]);
    assert!((acc - 0.75).abs() < 1e-15);
    assert!((p - 5.0 / 6.0).abs() < 1e-15);
    assert!((r - 0.75).abs() < 1e-15);
    assert!((f - 11.0 / 15.0).abs() < 1e-15);
    assert_eq!(oracle::auc(&[0.9, 0.8, 0.3, 0.2], &[true, true, false, false]), 1.0);
    assert_eq!(oracle::auc(&[0.5; 4], &[true, false, true, false]), 0.5);
}

const TOL: f64 = 1e-6;

#[test]
fn implementation_matches_golden_nlg() {
    let g = load_golden();
    assert_eq!(g.tokenizer, metrics::TOKENIZER_VERSION);
    for row in &g.pairs {
        let c = [row.candidate.as_str()];
        let r = [row.reference.as_str()];
        let b1 = metrics::bleu(&c, &r, 1, false).unwrap();
        let b4 = metrics::bleu(&c, &r, 4, false).unwrap();
        let rl = metrics::rouge_l(&row.candidate, &row.reference).unwrap();
        let me = metrics::meteor(&row.candidate, &row.reference);
        assert!((b1 - row.bleu1).abs() < TOL, "bleu1 {} vs {} for {:?}", b1, row.bleu1, row.candidate);
        assert!((b4 - row.bleu4).abs() < TOL, "bleu4 {} vs {} for {:?}", b4, row.bleu4, row.candidate);
        assert!((rl - row.rouge_l).abs() < TOL, "rouge {} vs {} for {:?}", rl, row.rouge_l, row.candidate);
        assert!((me - row.meteor).abs() < TOL, "meteor {} vs {} for {:?}", me, row.meteor, row.candidate);
    }
    let cands: Vec<&str> = g.pairs.iter().map(|p| p.candidate.as_str()).collect();
    let refs: Vec<&str> = g.pairs.iter().map(|p| p.reference.as_str()).collect();
    let scores = metrics::nlg_scores(&cands, &refs).unwrap();
    assert!((scores.bleu1 - g.corpus_bleu1).abs() < TOL);
    assert!((scores.bleu4 - g.corpus_bleu4).abs() < TOL);
    assert!((scores.rouge_l - g.mean_rouge_l).abs() < TOL);
    assert!((scores.meteor - g.mean_meteor).abs() < TOL);
}

#[test]
fn implementation_matches_golden_classification() {
    let g = load_golden();
    let col = LabelColumn::new(
        Feature::Attenuation,
        CLASS_TRUTH.iter().map(|t| Some(t.to_string())).collect(),
        CLASS_PRED.iter().map(|p| p.map(str::to_string)).collect(),
    );
    let m = metrics::classification_metrics(&col).unwrap();
    assert!((m.accuracy - g.accuracy).abs() < TOL);
    assert!((m.precision - g.macro_precision).abs() < TOL);
    assert!((m.recall - g.macro_recall).abs() < TOL);
    assert!((m.f1 - g.macro_f1).abs() < TOL);
    let auc = metrics::auc(&AUC_SCORES, &AUC_LABELS).unwrap();
    assert!((auc - g.auc).abs() < TOL);
}
