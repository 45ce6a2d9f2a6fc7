//! Report generation and feature re-extraction.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use renalct::backend::{generate_batch, make_backend, Backend, GeneratedReport, GenerationMode};
use renalct::extract::{parse_report_llm, parse_report_rule_based, ExtractionMethod, ExtractionResult};
use renalct::preprocess::{load_tensor, SliceImage};
use renalct::prompt::{render_generation_prompt, Modality};
use renalct::schema::load_manifest;
use tokio::sync::Semaphore;

use crate::args::{BackendFlags, ExtractArgs, GenerateArgs, MethodArg, ModalityArg, ModeArg};
use crate::config::{write_echo, RunConfig};
use crate::error::CliError;
use crate::stages::ImageIndexRow;
use crate::util::{base_config, prepare_output, read_jsonl, runtime, write_jsonl};

fn apply_backend_flags(cfg: &mut RunConfig, flags: &BackendFlags) {
    if let Some(e) = &flags.endpoint {
        cfg.backend.endpoint = e.clone();
    }
    if let Some(m) = &flags.model {
        cfg.backend.model = m.clone();
    }
}

fn load_images(dir: &Path) -> Result<BTreeMap<String, SliceImage>, CliError> {
    let index: Vec<ImageIndexRow> = read_jsonl(&dir.join("images.jsonl"))?;
    index
        .into_iter()
        .map(|row| Ok((row.annotation_id, load_tensor(&dir.join(&row.tensor))?.1)))
        .collect()
}

pub fn generate(args: &GenerateArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&args.common)?;
    apply_backend_flags(&mut cfg, &args.backend);
    if let Some(m) = &args.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(m) = args.modality {
        cfg.modality = match m {
            ModalityArg::FeatureOnly => Modality::FeatureOnly,
            ModalityArg::ImageOnly => Modality::ImageOnly,
            ModalityArg::Both => Modality::Both,
        };
    }
    if let Some(m) = args.mode {
        cfg.mode = match m {
            ModeArg::Ft => GenerationMode::Ft,
            ModeArg::Zs => GenerationMode::Zs,
        };
    }
    let out = prepare_output(&cfg)?;
    let manifest = load_manifest(cfg.manifest_path()?)?;
    let images = match (cfg.modality.uses_image(), &args.images) {
        (false, _) => BTreeMap::new(),
        (true, Some(dir)) => load_images(dir)?,
        (true, None) => {
            return Err(CliError::config(format!(
                "modality {} needs --images pointing at a preprocess output directory",
                cfg.modality
            )))
        }
    };
    let mut items = Vec::with_capacity(manifest.len());
    for a in &manifest.annotations {
        let img = images.get(&a.annotation_id);
        if cfg.modality.uses_image() && img.is_none() {
            return Err(CliError::data(format!("{}: no preprocessed image", a.annotation_id)));
        }
        let features = cfg.modality.uses_features().then_some(&a.features);
        items.push((a.annotation_id.clone(), render_generation_prompt(features, img, cfg.modality)?));
    }
    let backend = make_backend(&cfg.backend)?;
    let bound = cfg.jobs.min(cfg.backend.max_concurrent_requests);
    let results = runtime()?.block_on(generate_batch(backend, items, cfg.modality, cfg.mode, bound));
    let reports = results.into_iter().collect::<Result<Vec<GeneratedReport>, _>>()?;
    write_jsonl(&out.join("reports.jsonl"), &reports)?;
    write_echo(&out, "generate", &cfg)
}

async fn extract_llm(
    backend: Arc<dyn Backend>,
    inputs: Vec<(String, String)>,
    jobs: usize,
) -> Result<Vec<ExtractionResult>, CliError> {
    let permits = Arc::new(Semaphore::new(jobs));
    let handles: Vec<_> = inputs
        .into_iter()
        .map(|(id, text)| {
            let backend = Arc::clone(&backend);
            let permits = Arc::clone(&permits);
            tokio::spawn(async move {
                let _p = permits.acquire_owned().await.expect("semaphore open");
                parse_report_llm(&text, backend.as_ref()).await.map(|mut r| {
                    r.annotation_id = id;
                    r
                })
            })
        })
        .collect();
    let mut out = Vec::with_capacity(handles.len());
    for h in handles {
        out.push(h.await.map_err(|e| CliError::data(format!("extraction task: {e}")))??);
    }
    Ok(out)
}

pub fn extract(args: &ExtractArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&args.common)?;
    apply_backend_flags(&mut cfg, &args.backend);
    if let Some(m) = &args.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(m) = args.method {
        cfg.extraction = match m {
            MethodArg::Rule => ExtractionMethod::Rule,
            MethodArg::Llm => ExtractionMethod::Llm,
        };
    }
    let out = prepare_output(&cfg)?;
    let inputs: Vec<(String, String)> = match &args.reports {
        Some(path) => read_jsonl::<GeneratedReport>(path)?
            .into_iter()
            .map(|r| (r.annotation_id, r.text))
            .collect(),
        None => load_manifest(cfg.manifest_path()?)?
            .annotations
            .into_iter()
            .map(|a| (a.annotation_id, a.sentence))
            .collect(),
    };
    let results = match cfg.extraction {
        ExtractionMethod::Rule => inputs
            .into_iter()
            .map(|(id, text)| ExtractionResult {
                annotation_id: id,
                ..parse_report_rule_based(&text)
            })
            .collect(),
        ExtractionMethod::Llm => {
            let backend = make_backend(&cfg.backend)?;
            runtime()?.block_on(extract_llm(backend, inputs, cfg.jobs))?
        }
    };
    write_jsonl(&out.join("extractions.jsonl"), &results)?;
    write_echo(&out, "extract", &cfg)
}
