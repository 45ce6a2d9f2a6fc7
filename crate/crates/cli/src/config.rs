//! Run configuration: one JSON file, overridable by flags, echoed into every output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use renalct::backend::{BackendConfig, GenerationMode};
use renalct::extract::ExtractionMethod;
use renalct::metrics::TOKENIZER_VERSION;
use renalct::preprocess::{PreprocessOptions, WindowSpec};
use renalct::prompt::{templates, Modality};
use renalct::split::SplitConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    /// Fail with exit code 5 when a non-AUC cell cannot be computed.
    pub strict: bool,
    /// Threshold score-only binary columns at the training-fold max-F1 point.
    pub thresholds_from_training: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub dicom_root: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub preprocess: PreprocessOptions,
    pub split: SplitConfig,
    pub backend: BackendConfig,
    pub modality: Modality,
    pub mode: GenerationMode,
    pub extraction: ExtractionMethod,
    pub metrics: MetricOptions,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: None,
            dicom_root: None,
            output_dir: None,
            preprocess: PreprocessOptions::default(),
            split: SplitConfig::default(),
            backend: BackendConfig::default(),
            modality: Modality::FeatureOnly,
            mode: GenerationMode::default(),
            extraction: ExtractionMethod::Rule,
            metrics: MetricOptions::default(),
            jobs: 4,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.jobs == 0 {
            return Err(CliError::config("jobs must be at least 1"));
        }
        WindowSpec::new(self.preprocess.window.level, self.preprocess.window.width)?;
        self.backend.validate()?;
        Ok(())
    }

    pub fn manifest_path(&self) -> Result<&Path, CliError> {
        self.manifest.as_deref().ok_or_else(|| CliError::config("no manifest: pass --manifest or set \"manifest\""))
    }

    pub fn dicom_root(&self) -> Result<&Path, CliError> {
        self.dicom_root.as_deref().ok_or_else(|| CliError::config("no DICOM root: pass --dicom-root or set \"dicom_root\""))
    }

    pub fn output_dir(&self) -> Result<&Path, CliError> {
        self.output_dir.as_deref().ok_or_else(|| CliError::config("no output directory: pass --out-dir or set \"output_dir\""))
    }
}

#[derive(Serialize)]
struct TemplateRef {
    version: u32,
    sha256: String,
}

#[derive(Serialize)]
struct Echo<'a> {
    command: &'a str,
    renalct_version: &'static str,
    tokenizer: &'static str,
    templates: BTreeMap<String, TemplateRef>,
    config: &'a RunConfig,
}

/// Writes `config_echo.{command}.json` into `dir`.
pub fn write_echo(dir: &Path, command: &str, cfg: &RunConfig) -> Result<(), CliError> {
    let echo = Echo {
        command,
        renalct_version: env!("CARGO_PKG_VERSION"),
        tokenizer: TOKENIZER_VERSION,
        templates: templates()
            .into_iter()
            .map(|t| (t.name, TemplateRef { version: t.version, sha256: t.sha256 }))
            .collect(),
        config: cfg,
    };
    let text = serde_json::to_string_pretty(&echo).expect("echo serializes") + "\n";
    fs::write(dir.join(format!("config_echo.{}.json", command.replace(' ', "_"))), text)?;
    Ok(())
}
