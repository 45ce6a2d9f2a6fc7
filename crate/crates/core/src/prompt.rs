//! Prompt rendering for sentence extraction, feature extraction and report
//! generation.
//!
//! Template text lives in `templates/*.txt`. Each file starts with a
//! `template:`/`version:` header terminated by `---`. Rendered output is
//! snapshot-tested, so any wording change needs a version bump.

use std::fmt;
use std::io::Cursor;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::preprocess::{to_gray8, SliceImage};
use crate::schema::{Attenuation, Enhancement, FeatureSet, Growth, Position};

const SENTENCE_EXTRACTION: &str = include_str!("../templates/sentence_extraction.txt");
const FEATURE_EXTRACTION: &str = include_str!("../templates/feature_extraction.txt");
const REPORT_GENERATION: &str = include_str!("../templates/report_generation.txt");

/// Marker that introduces the placeholder for the generation image.
pub const IMAGE_PLACEHOLDER: &str = "<image>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    FeatureOnly,
    ImageOnly,
    Both,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::FeatureOnly, Modality::ImageOnly, Modality::Both];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::FeatureOnly => "feature_only",
            Modality::ImageOnly => "image_only",
            Modality::Both => "both",
        }
    }

    pub fn uses_features(self) -> bool {
        self != Modality::ImageOnly
    }

    pub fn uses_image(self) -> bool {
        self != Modality::FeatureOnly
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Modality::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| PromptError::UnknownModality(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    SentenceExtraction,
    FeatureExtraction,
    ReportGeneration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub kind: PromptKind,
    /// Empty when the template defines no system message.
    pub system_text: String,
    pub user_text: String,
    /// `data:image/png;base64,...` of the 8-bit slice.
    pub image_attachment: Option<String>,
    /// `name@version`.
    pub template_version: String,
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("sentence is empty")]
    EmptySentence,
    #[error("modality {modality} requires {missing}")]
    MissingInput { modality: Modality, missing: &'static str },
    #[error("unknown modality {0:?}")]
    UnknownModality(String),
    #[error("image encoding failed: {0}")]
    Image(String),
}

/// Parsed template file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pub name: String,
    pub version: u32,
    pub body: String,
    pub sha256: String,
}

fn parse_template(source: &str) -> Template {
    let (header, body) = source.split_once("\n---\n").expect("template header terminated by ---");
    let field = |key: &str| {
        header
            .lines()
            .find_map(|l| l.strip_prefix(key).map(|v| v.trim().to_string()))
            .unwrap_or_else(|| panic!("template header lacks {key}"))
    };
    Template {
        name: field("template:"),
        version: field("version:").parse().expect("numeric template version"),
        body: body.strip_suffix('\n').unwrap_or(body).to_string(),
        sha256: format!("{:x}", Sha256::digest(source.as_bytes())),
    }
}

/// All bundled templates, for provenance records.
pub fn templates() -> Vec<Template> {
    [SENTENCE_EXTRACTION, FEATURE_EXTRACTION, REPORT_GENERATION]
        .into_iter()
        .map(parse_template)
        .collect()
}

fn section<'a>(body: &'a str, name: &str) -> &'a str {
    let tag = format!("[{name}]\n");
    let start = body.find(&tag).map(|i| i + tag.len()).expect("template section present");
    let rest = &body[start..];
    let end = rest.find("\n[").unwrap_or(rest.len());
    &rest[..end]
}

fn version_tag(t: &Template) -> String {
    format!("{}@{}", t.name, t.version)
}

fn embed(text: &str) -> String {
    serde_json::to_string(text).expect("strings serialize")
}

/// Prompt for pulling renal snippets out of a full report. Empty reports render normally.
pub fn render_sentence_extraction_prompt(report_text: &str) -> RenderedPrompt {
    let t = parse_template(SENTENCE_EXTRACTION);
    RenderedPrompt {
        kind: PromptKind::SentenceExtraction,
        system_text: String::new(),
        user_text: t.body.replace("{{text}}", &embed(report_text)),
        image_attachment: None,
        template_version: version_tag(&t),
    }
}

pub fn render_feature_extraction_prompt(sentence: &str) -> Result<RenderedPrompt, PromptError> {
    if sentence.trim().is_empty() {
        return Err(PromptError::EmptySentence);
    }
    let t = parse_template(FEATURE_EXTRACTION);
    Ok(RenderedPrompt {
        kind: PromptKind::FeatureExtraction,
        system_text: String::new(),
        user_text: t.body.replace("{{text}}", &embed(sentence)),
        image_attachment: None,
        template_version: version_tag(&t),
    })
}

/// Recovers the JSON-string payload embedded by the two extraction prompts.
pub fn embedded_text(user_text: &str) -> Option<String> {
    let mut lines = user_text.lines().rev().peekable();
    let payload = lines.next()?;
    let marker = lines.next()?;
    marker.ends_with("(JSON string):").then_some(())?;
    serde_json::from_str(payload).ok()
}

/// Size with at most two decimals and no trailing zeros: `1.78`, `2`, `0.5`.
pub fn format_size_cm(cm: f64) -> String {
    let s = format!("{cm:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

fn feature_block(template_body: &str, f: &FeatureSet) -> String {
    let size = f.size_cm.map_or_else(|| "unknown".to_string(), format_size_cm);
    section(template_body, "features")
        .replace("{{position}}", f.position.as_str())
        .replace("{{size_cm}}", &size)
        .replace("{{exophytic}}", f.exophytic.as_str())
        .replace("{{attenuation}}", f.attenuation.as_str())
        .replace("{{enhancement}}", f.enhancement.as_str())
        .replace("{{cyst}}", &f.cyst.to_string())
        .replace("{{mass}}", &f.mass.to_string())
        .replace("{{tumor}}", &f.tumor.to_string())
}

/// PNG data URI of a slice mapped from [−1, 1] to 0..=255.
pub fn encode_image(img: &SliceImage) -> Result<String, PromptError> {
    let mut buf = Cursor::new(Vec::new());
    to_gray8(img)
        .write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| PromptError::Image(e.to_string()))?;
    Ok(format!("data:image/png;base64,{}", STANDARD.encode(buf.into_inner())))
}

pub fn render_generation_prompt(
    features: Option<&FeatureSet>,
    image: Option<&SliceImage>,
    modality: Modality,
) -> Result<RenderedPrompt, PromptError> {
    let t = parse_template(REPORT_GENERATION);
    let mut parts = vec![section(&t.body, &format!("intro.{modality}")).to_string()];
    if modality.uses_features() {
        let f = features.ok_or(PromptError::MissingInput {
            modality,
            missing: "features",
        })?;
        parts.push(feature_block(&t.body, f));
    }
    let image_attachment = if modality.uses_image() {
        let img = image.ok_or(PromptError::MissingInput {
            modality,
            missing: "an image",
        })?;
        parts.push(section(&t.body, "image").to_string());
        Some(encode_image(img)?)
    } else {
        None
    };
    Ok(RenderedPrompt {
        kind: PromptKind::ReportGeneration,
        system_text: section(&t.body, "system").to_string(),
        user_text: parts.join("\n\n"),
        image_attachment,
        template_version: version_tag(&t),
    })
}

/// Reads the feature block of a rendered generation prompt back into a feature set.
pub fn parse_feature_block(user_text: &str) -> Option<FeatureSet> {
    let mut lines = user_text.lines().skip_while(|l| *l != "Features:").skip(1);
    let mut next = |label: &str| -> Option<String> {
        let line = lines.next()?;
        line.strip_prefix("- ")?.strip_prefix(label)?.strip_prefix(": ").map(str::to_string)
    };
    let position: Position = next("Position")?.parse().ok()?;
    let size = next("Largest size for the lesion (cm)")?;
    let size_cm = if size == "unknown" { None } else { Some(size.parse().ok()?) };
    let exophytic: Growth = next("Exophytic")?.parse().ok()?;
    let attenuation: Attenuation = next("Attenuation")?.parse().ok()?;
    let enhancement: Enhancement = next("Enhancement")?.parse().ok()?;
    let cyst = next("Cyst")?.parse().ok()?;
    let mass = next("Mass")?.parse().ok()?;
    let tumor = next("Tumor")?.parse().ok()?;
    Some(FeatureSet {
        position,
        raw_size: None,
        size_cm,
        size_unparseable: false,
        exophytic,
        attenuation,
        enhancement,
        cyst,
        mass,
        tumor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    use crate::preprocess::{SpatialOp, WindowSpec};

    pub(crate) fn worked_example() -> FeatureSet {
        FeatureSet {
            position: Position::Left,
            raw_size: None,
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

    fn tiny_image() -> SliceImage {
        SliceImage {
            grid: Array2::from_shape_fn((4, 4), |(r, c)| (r as f64 - c as f64) / 3.0),
            window: WindowSpec::default(),
            spatial_op: SpatialOp::None,
            source: None,
        }
    }

    #[test]
    fn size_formatting() {
        assert_eq!(format_size_cm(1.78), "1.78");
        assert_eq!(format_size_cm(2.0), "2");
        assert_eq!(format_size_cm(0.5), "0.5");
        assert_eq!(format_size_cm(3.456), "3.46");
    }

    #[test]
    fn feature_block_of_worked_example() {
        let p = render_generation_prompt(Some(&worked_example()), None, Modality::FeatureOnly).unwrap();
        assert!(p.user_text.contains("- Largest size for the lesion (cm): 1.78\n"));
        assert!(p.user_text.ends_with("- Tumor: false"));
        assert!(!p.user_text.contains(IMAGE_PLACEHOLDER));
        assert!(p.image_attachment.is_none());
        assert_eq!(parse_feature_block(&p.user_text), Some(worked_example()));
    }

    #[test]
    fn all_unknown_lists_every_line() {
        let p = render_generation_prompt(Some(&FeatureSet::unknown()), None, Modality::FeatureOnly).unwrap();
        let block: Vec<&str> = p.user_text.lines().skip_while(|l| *l != "Features:").skip(1).collect();
        assert_eq!(block.len(), 8);
        assert!(block[..5].iter().all(|l| l.ends_with("unknown")));
        assert!(block[5..].iter().all(|l| l.ends_with("false")));
    }

    #[test]
    fn image_only_has_placeholder_but_no_features() {
        let p = render_generation_prompt(None, Some(&tiny_image()), Modality::ImageOnly).unwrap();
        assert!(!p.user_text.contains("Features:"));
        assert!(p.user_text.ends_with(IMAGE_PLACEHOLDER));
        assert!(p.image_attachment.as_deref().unwrap().starts_with("data:image/png;base64,"));
    }

    #[test]
    fn modality_mismatch_is_an_error() {
        assert!(matches!(
            render_generation_prompt(Some(&worked_example()), None, Modality::Both),
            Err(PromptError::MissingInput { missing: "an image", .. })
        ));
        assert!(render_generation_prompt(None, Some(&tiny_image()), Modality::FeatureOnly).is_err());
    }

    #[test]
    fn feature_extraction_embeds_quoted_sentence() {
        assert!(matches!(render_feature_extraction_prompt("  "), Err(PromptError::EmptySentence)));
        let s = "A \"complex\" cyst\nin the left kidney \\ series 4.";
        let p = render_feature_extraction_prompt(s).unwrap();
        assert!(p.user_text.contains("\"Raw_Size\": \"3.2 * 2.8 cm\""));
        assert!(p.user_text.contains("exclude kidney stones and hydronephrosis"));
        assert_eq!(embedded_text(&p.user_text).as_deref(), Some(s));
    }

    #[test]
    fn sentence_extraction_accepts_empty_report() {
        let p = render_sentence_extraction_prompt("");
        assert!(p.user_text.contains("\"renal_extracts\""));
        assert_eq!(embedded_text(&p.user_text).as_deref(), Some(""));
    }

    #[test]
    fn templates_carry_versions() {
        let ts = templates();
        assert_eq!(ts.len(), 3);
        assert!(ts.iter().all(|t| t.version >= 1 && t.sha256.len() == 64));
    }
}
