//! Data-side subcommands: phantom generation, ingest, preprocessing and splitting.

use std::fs;
use std::path::{Path, PathBuf};

use renalct::ingest::{export_png16, load_series, png_name, resolve_slice, series_dir, RawSlice};
use renalct::phantom::{export_case, sample_cohort, MarginalMode, PhantomConfig};
use renalct::preprocess::{export_tensor, preprocess_slice, to_gray8, SpatialOp, WindowSpec};
use renalct::schema::{load_manifest, save_manifest, Annotation};
use renalct::split::split;
use serde::{Deserialize, Serialize};

use crate::args::{IngestArgs, MarginalArg, PhantomGenArgs, SplitArgs};
use crate::config::write_echo;
use crate::error::CliError;
use crate::util::{base_config, par_map, prepare_output, write_jsonl, write_text};

pub fn phantom_gen(args: &PhantomGenArgs) -> Result<(), CliError> {
    let cfg = base_config(&args.common)?;
    let out = prepare_output(&cfg)?;
    let mut pc: PhantomConfig = match &args.phantom_config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
        }
        None => PhantomConfig::default(),
    };
    if let Some(n) = args.n {
        pc.n_annotations = n;
    }
    if let Some(s) = args.seed {
        pc.seed = s;
    }
    if let Some(m) = args.marginals {
        pc.marginal_mode = match m {
            MarginalArg::Sampled => MarginalMode::Sampled,
            MarginalArg::Exact => MarginalMode::Exact,
        };
    }
    if let Some(m) = args.matrix {
        pc.matrix = m;
    }
    if let Some(s) = args.slices {
        pc.slices_per_series = s;
    }

    let cohort = sample_cohort(&pc)?;
    save_manifest(&cohort.manifest, out.join("manifest.jsonl"))?;
    if !args.no_dicom {
        let root = out.join("dicom");
        for r in par_map(&cohort.cases, cfg.jobs, |c| export_case(c, &pc, &root)) {
            r?;
        }
    }
    write_text(&out.join("phantom_config.json"), &(serde_json::to_string_pretty(&pc).expect("config serializes") + "\n"))?;
    write_echo(&out, "phantom gen", &cfg)
}

fn apply_ingest_flags(args: &IngestArgs) -> Result<crate::config::RunConfig, CliError> {
    let mut cfg = base_config(&args.common)?;
    if let Some(m) = &args.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(d) = &args.dicom_root {
        cfg.dicom_root = Some(d.clone());
    }
    let w = cfg.preprocess.window;
    cfg.preprocess.window = WindowSpec::new(args.window_level.unwrap_or(w.level), args.window_width.unwrap_or(w.width))?;
    Ok(cfg)
}

fn resolve(root: &Path, a: &Annotation) -> Result<RawSlice, CliError> {
    let dir = series_dir(root, &a.report_id, a.slice.series_number);
    let vol = load_series(&dir).map_err(|e| CliError::data(format!("{}: {e}", a.annotation_id)))?;
    resolve_slice(&vol, &a.slice).map_err(|e| CliError::data(format!("{}: {e}", a.annotation_id)))
}

/// One row of `slices.jsonl`.
#[derive(Debug, Serialize, Deserialize)]
pub struct SliceIndexRow {
    pub annotation_id: String,
    pub dicom_file: PathBuf,
    pub png16: String,
    pub slice_location: f64,
    pub instance_number: i32,
    pub rows: usize,
    pub cols: usize,
    pub pixel_spacing_mm: Option<(f64, f64)>,
}

pub fn ingest(args: &IngestArgs) -> Result<(), CliError> {
    let cfg = apply_ingest_flags(args)?;
    let out = prepare_output(&cfg)?;
    let manifest = load_manifest(cfg.manifest_path()?)?;
    let root = cfg.dicom_root()?.to_path_buf();
    let png_dir = out.join("png16");
    fs::create_dir_all(&png_dir)?;
    let rows = par_map(&manifest.annotations, cfg.jobs, |a| -> Result<SliceIndexRow, CliError> {
        let raw = resolve(&root, a)?;
        let name = png_name(&a.report_id, &a.slice);
        export_png16(&raw, &png_dir.join(&name))?;
        let (r, c) = raw.hu.dim();
        Ok(SliceIndexRow {
            annotation_id: a.annotation_id.clone(),
            dicom_file: raw.file.clone(),
            png16: format!("png16/{name}"),
            slice_location: raw.slice_location,
            instance_number: raw.instance_number,
            rows: r,
            cols: c,
            pixel_spacing_mm: raw.pixel_spacing,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    write_jsonl(&out.join("slices.jsonl"), &rows)?;
    write_echo(&out, "ingest", &cfg)
}

/// One row of `images.jsonl`, the index `generate` reads for image modalities.
#[derive(Debug, Serialize, Deserialize)]
pub struct ImageIndexRow {
    pub annotation_id: String,
    /// Tensor sidecar, relative to the preprocess output directory.
    pub tensor: String,
    pub png: String,
    pub spatial_op: SpatialOp,
}

pub fn preprocess(args: &IngestArgs) -> Result<(), CliError> {
    let cfg = apply_ingest_flags(args)?;
    let out = prepare_output(&cfg)?;
    let manifest = load_manifest(cfg.manifest_path()?)?;
    let root = cfg.dicom_root()?.to_path_buf();
    let (tensor_dir, png_dir) = (out.join("tensors"), out.join("png"));
    fs::create_dir_all(&tensor_dir)?;
    fs::create_dir_all(&png_dir)?;
    let opts = cfg.preprocess;
    let rows = par_map(&manifest.annotations, cfg.jobs, |a| -> Result<ImageIndexRow, CliError> {
        let raw = resolve(&root, a)?;
        let img = preprocess_slice(&raw, &opts)?;
        export_tensor(&img, &a.annotation_id, &tensor_dir, &a.annotation_id)?;
        let png = format!("{}.png", a.annotation_id);
        to_gray8(&img)
            .save(png_dir.join(&png))
            .map_err(|e| CliError::data(format!("{}: {e}", a.annotation_id)))?;
        Ok(ImageIndexRow {
            annotation_id: a.annotation_id.clone(),
            tensor: format!("tensors/{}.json", a.annotation_id),
            png: format!("png/{png}"),
            spatial_op: img.spatial_op,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    write_jsonl(&out.join("images.jsonl"), &rows)?;
    write_echo(&out, "preprocess", &cfg)
}

pub fn split_cmd(args: &SplitArgs) -> Result<(), CliError> {
    let mut cfg = base_config(&args.common)?;
    if let Some(m) = &args.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(k) = args.k {
        cfg.split.k = k;
    }
    if let Some(s) = args.seed {
        cfg.split.seed = s;
    }
    cfg.split.strict_patient |= args.strict_patient;
    let out = prepare_output(&cfg)?;
    let manifest = load_manifest(cfg.manifest_path()?)?;
    let folds = split(&manifest, &cfg.split)?;
    folds.save(out.join("folds.json"))?;
    write_echo(&out, "split", &cfg)
}
