use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "renalct", version, about = "Renal CT report generation and evaluation pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic cohorts.
    #[command(subcommand)]
    Phantom(PhantomCommand),
    /// Resolve each annotation's slice reference and export 16-bit PNGs.
    Ingest(IngestArgs),
    /// Window, standardize and normalize each referenced slice.
    Preprocess(IngestArgs),
    /// Assign annotations to stratified folds.
    Split(SplitArgs),
    /// Generate one report per annotation.
    Generate(GenerateArgs),
    /// Re-extract features from report text.
    Extract(ExtractArgs),
    /// Score predictions (and optionally reports) per fold.
    Evaluate(EvaluateArgs),
    /// Average fold tables from one or more evaluation directories.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
pub enum PhantomCommand {
    /// Sample a phantom cohort and write its manifest and DICOM series.
    Gen(PhantomGenArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Upper bound on parallel per-annotation work.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MarginalArg {
    Sampled,
    Exact,
}

#[derive(Debug, Args)]
pub struct PhantomGenArgs {
    #[command(flatten)]
    pub common: Common,
    /// Phantom configuration JSON; the flags below override it.
    #[arg(long)]
    pub phantom_config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub marginals: Option<MarginalArg>,
    #[arg(long)]
    pub matrix: Option<usize>,
    #[arg(long)]
    pub slices: Option<usize>,
    /// Write only the manifest.
    #[arg(long)]
    pub no_dicom: bool,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub dicom_root: Option<PathBuf>,
    #[arg(long)]
    pub window_level: Option<f64>,
    #[arg(long)]
    pub window_width: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep every annotation of a patient in the same fold.
    #[arg(long)]
    pub strict_patient: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModalityArg {
    FeatureOnly,
    ImageOnly,
    Both,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Ft,
    Zs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Rule,
    Llm,
}

#[derive(Debug, Args)]
pub struct BackendFlags {
    /// Chat-completions base URL, or `stub:` / `stub:noisy?rate=R&seed=S`.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub backend: BackendFlags,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub modality: Option<ModalityArg>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Output directory of `preprocess`, required for image modalities.
    #[arg(long)]
    pub images: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub backend: BackendFlags,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Generated reports JSONL; without it the manifest sentences are parsed.
    #[arg(long)]
    pub reports: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Prediction or extraction JSONL keyed by annotation_id.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Fold file from `split`; without it one table covers every annotation.
    #[arg(long)]
    pub folds: Option<PathBuf>,
    /// Generated reports JSONL, scored against the manifest sentences.
    #[arg(long)]
    pub reports: Option<PathBuf>,
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub thresholds_from_training: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Evaluation output directories.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub strict: bool,
}
