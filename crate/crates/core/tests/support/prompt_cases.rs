//! Fixed inputs for the prompt golden files and their on-disk layout.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use renalct::preprocess::{preprocess_grid, PreprocessOptions, SliceImage};
use renalct::prompt::{
    render_feature_extraction_prompt, render_generation_prompt, render_sentence_extraction_prompt, Modality,
    RenderedPrompt,
};
use renalct::schema::{Attenuation, Enhancement, FeatureSet, Growth, Position};

pub const REPORT: &str = "FINDINGS:\nLiver: Unremarkable.\nKidneys: 1.8 cm hypodense \"cyst\" in the left kidney.\nNo hydronephrosis.";
pub const SENTENCE: &str = "1.8 cm exophytic hypodense cyst in the left kidney without enhancement.";

pub fn features() -> FeatureSet {
    FeatureSet {
        position: Position::Left,
        raw_size: Some("1.78 cm".into()),
        size_cm: Some(1.78),
        size_unparseable: false,
        exophytic: Growth::Exophytic,
        attenuation: Attenuation::Hypoattenuating,
        enhancement: Enhancement::Enhancement,
        cyst: true,
        mass: false,
        tumor: false,
    }
}

pub fn image() -> SliceImage {
    let hu = Array2::from_shape_fn((512, 512), |(r, c)| -200.0 + (r + c) as f64 * 0.5);
    preprocess_grid(&hu, &PreprocessOptions::default()).unwrap()
}

/// Golden file name and rendered prompt for every template and modality.
pub fn cases() -> Vec<(&'static str, RenderedPrompt)> {
    let f = features();
    let img = image();
    vec![
        ("p1_sentence_extraction.txt", render_sentence_extraction_prompt(REPORT)),
        ("p2_feature_extraction.txt", render_feature_extraction_prompt(SENTENCE).unwrap()),
        ("p3_feature_only.txt", render_generation_prompt(Some(&f), None, Modality::FeatureOnly).unwrap()),
        ("p3_image_only.txt", render_generation_prompt(None, Some(&img), Modality::ImageOnly).unwrap()),
        ("p3_both.txt", render_generation_prompt(Some(&f), Some(&img), Modality::Both).unwrap()),
    ]
}

/// Text layout of a golden file.
pub fn layout(p: &RenderedPrompt) -> String {
    let image = match &p.image_attachment {
        Some(uri) if uri.starts_with("data:image/png;base64,") => "image/png",
        Some(_) => "other",
        None => "none",
    };
    format!(
        "### template\n{}\n### system\n{}\n### user\n{}\n### attachment\n{}\n",
        p.template_version, p.system_text, p.user_text, image
    )
}

pub fn golden_dir(core_manifest_dir: &Path) -> PathBuf {
    core_manifest_dir.join("tests").join("golden").join("prompts")
}

/// Names of golden files whose bytes differ from the current rendering.
pub fn mismatches(core_manifest_dir: &Path) -> Vec<String> {
    let dir = golden_dir(core_manifest_dir);
    cases()
        .into_iter()
        .filter(|(name, p)| std::fs::read(dir.join(name)).ok().as_deref() != Some(layout(p).as_bytes()))
        .map(|(name, _)| name.to_string())
        .collect()
}
