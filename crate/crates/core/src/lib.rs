//! Slice-grounded renal CT reporting pipeline.
//!
//! The crate covers the full path from curated annotations to scored reports:
//!
//! * [`schema`]: feature schema, annotation records and the JSONL manifest format
//! * [`ingest`]: DICOM series loading and slice reference resolution
//! * [`preprocess`]: HU windowing, 512×512 standardization and [−1, 1] normalization
//! * [`split`]: multi-label iterative stratified k-fold with minority repair
//! * [`prompt`]: sentence extraction, feature extraction and report generation prompts
//! * [`backend`]: OpenAI-compatible chat client and deterministic local stubs
//! * [`extract`]: rule-based and LLM-backed feature re-extraction from report text
//! * [`metrics`]: classification, size, AUC, random baseline and NLG metrics
//! * [`phantom`]: synthetic cohort generator with recoverable ground truth
//! * [`predictor`]: prediction-file boundary for external detectors

pub mod backend;
pub mod extract;
pub mod ingest;
pub mod metrics;
pub mod phantom;
pub mod predictor;
pub mod preprocess;
pub mod prompt;
pub mod schema;
pub mod split;

pub use schema::{
    Annotation, Attenuation, CohortManifest, Enhancement, FeatureSet, Growth, Plane, Position,
    Provenance, SliceRef,
};
