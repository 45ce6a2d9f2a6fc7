//! Scoring: per-feature classification metrics, size error, rank AUC, the
//! random baseline, and BLEU / ROUGE-L / METEOR.
//!
//! Anything that cannot be computed from its inputs returns
//! [`NotComputable`] instead of a silent zero; tables render it as `--`.

mod classification;
mod nlg;
mod table;
mod tokenize;

use thiserror::Error;

pub use classification::{
    auc, classification_metrics, column_auc, random_baseline, size_mse, BaselineRow, ClassMetrics, LabelColumn,
    SizeError,
};
pub use nlg::{bleu, bleu_sentence, meteor, meteor_corpus, nlg_scores, rouge_l, rouge_l_corpus, NlgScores};
pub use table::{FeatureRow, MetricTable};
pub use tokenize::{tokenize, TOKENIZER_VERSION};

/// A metric whose inputs do not support it (no scorable rows, one class only, …).
#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("not computable: {reason}")]
pub struct NotComputable {
    pub reason: String,
}

impl NotComputable {
    pub(crate) fn new(reason: impl Into<String>) -> Self {
        NotComputable { reason: reason.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("empty candidate set")]
    EmptyCorpus,
    #[error("{candidates} candidates but {references} references")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("empty reference at index {0}")]
    EmptyReference(usize),
    #[error("max_n must be at least 1")]
    InvalidOrder,
}
