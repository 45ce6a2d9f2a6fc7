//! Clinical feature schema, slice-referenced annotations and the JSONL manifest.
//!
//! A manifest file is JSON Lines. The first line may be a header object
//! carrying `schema_version` and `provenance`; every other non-blank line is
//! one [`Annotation`]. Enum tokens are lowercase with underscores and unknown
//! feature values are written as the explicit token `"unknown"`.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

macro_rules! token_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $token:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $token)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $token),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = UnknownToken;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($token => Ok($name::$variant),)+
                    other => Err(UnknownToken {
                        kind: stringify!($name),
                        token: other.to_string(),
                    }),
                }
            }
        }
    };
}

/// A token that is not among an enum's declared values.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown {kind} token `{token}`")]
pub struct UnknownToken {
    pub kind: &'static str,
    pub token: String,
}

token_enum!(
    /// Lesion side.
    Position { Left => "left", Right => "right", Unknown => "unknown" }
);

token_enum!(
    /// Growth pattern relative to the kidney contour.
    Growth { Exophytic => "exophytic", Endophytic => "endophytic", Unknown => "unknown" }
);

token_enum!(
    /// Lesion density relative to renal parenchyma.
    Attenuation {
        Hypoattenuating => "hypoattenuating",
        Hyperattenuating => "hyperattenuating",
        Isoattenuating => "isoattenuating",
        Unknown => "unknown",
    }
);

token_enum!(
    /// Post-contrast enhancement.
    Enhancement {
        Enhancement => "enhancement",
        NonEnhancement => "non_enhancement",
        Unknown => "unknown",
    }
);

token_enum!(
    /// Acquisition plane of a referenced image.
    Plane { Coronal => "coronal", Axial => "axial", Sagittal => "sagittal", Unknown => "unknown" }
);

token_enum!(
    /// Where a manifest came from.
    Provenance { Real => "real", Phantom => "phantom" }
);

/// The eight-feature renal lesion record.
///
/// The four categorical fields always carry an explicit value; `Unknown` is a
/// value, not an absence. `size_cm` is `None` when the size was not reported.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub position: Position,
    #[serde(default)]
    pub raw_size: Option<String>,
    #[serde(default)]
    pub size_cm: Option<f64>,
    /// Set when `raw_size` was present but no centimetre value could be derived from it.
    #[serde(default, skip_serializing_if = "is_false")]
    pub size_unparseable: bool,
    pub exophytic: Growth,
    pub attenuation: Attenuation,
    pub enhancement: Enhancement,
    #[serde(default)]
    pub cyst: bool,
    #[serde(default)]
    pub mass: bool,
    #[serde(default)]
    pub tumor: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl Default for FeatureSet {
    fn default() -> Self {
        FeatureSet::unknown()
    }
}

impl FeatureSet {
    /// All categorical fields unknown, no size, all lesion-type flags false.
    pub fn unknown() -> Self {
        FeatureSet {
            position: Position::Unknown,
            raw_size: None,
            size_cm: None,
            size_unparseable: false,
            exophytic: Growth::Unknown,
            attenuation: Attenuation::Unknown,
            enhancement: Enhancement::Unknown,
            cyst: false,
            mass: false,
            tumor: false,
        }
    }

    /// True when no field carries any information.
    pub fn is_empty(&self) -> bool {
        self.position == Position::Unknown
            && self.size_cm.is_none()
            && self.exophytic == Growth::Unknown
            && self.attenuation == Attenuation::Unknown
            && self.enhancement == Enhancement::Unknown
            && !self.cyst
            && !self.mass
            && !self.tumor
    }

    /// Value of one feature: a class token for categorical features, `None` if unknown.
    pub fn token(&self, feature: Feature) -> Option<&'static str> {
        let tok = match feature {
            Feature::Position => self.position.as_str(),
            Feature::Exophytic => self.exophytic.as_str(),
            Feature::Attenuation => self.attenuation.as_str(),
            Feature::Enhancement => self.enhancement.as_str(),
            Feature::Cyst => bool_token(self.cyst),
            Feature::Mass => bool_token(self.mass),
            Feature::Tumor => bool_token(self.tumor),
            Feature::Size => return None,
        };
        (tok != "unknown").then_some(tok)
    }
}

fn bool_token(b: bool) -> &'static str {
    if b {
        "true"
    } else {
        "false"
    }
}

/// One feature column of the schema.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Position,
    #[serde(rename = "size_cm")]
    Size,
    Exophytic,
    Attenuation,
    Enhancement,
    Cyst,
    Mass,
    Tumor,
}

impl Feature {
    /// Table order: the seven categorical features, then size.
    pub const ALL: [Feature; 8] = [
        Feature::Position,
        Feature::Exophytic,
        Feature::Attenuation,
        Feature::Enhancement,
        Feature::Cyst,
        Feature::Mass,
        Feature::Tumor,
        Feature::Size,
    ];

    pub const CATEGORICAL: [Feature; 7] = [
        Feature::Position,
        Feature::Exophytic,
        Feature::Attenuation,
        Feature::Enhancement,
        Feature::Cyst,
        Feature::Mass,
        Feature::Tumor,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Feature::Position => "position",
            Feature::Size => "size_cm",
            Feature::Exophytic => "exophytic",
            Feature::Attenuation => "attenuation",
            Feature::Enhancement => "enhancement",
            Feature::Cyst => "cyst",
            Feature::Mass => "mass",
            Feature::Tumor => "tumor",
        }
    }

    /// Row label used in rendered metric tables.
    pub fn label(self) -> &'static str {
        match self {
            Feature::Position => "Position",
            Feature::Size => "Size_cm",
            Feature::Exophytic => "Exophytic",
            Feature::Attenuation => "Attenuation",
            Feature::Enhancement => "Enhancement",
            Feature::Cyst => "Cyst",
            Feature::Mass => "Mass",
            Feature::Tumor => "Tumor",
        }
    }

    /// Known class tokens; empty for the size regression target.
    pub fn classes(self) -> &'static [&'static str] {
        match self {
            Feature::Position => &["left", "right"],
            Feature::Exophytic => &["exophytic", "endophytic"],
            Feature::Attenuation => &["hypoattenuating", "hyperattenuating", "isoattenuating"],
            Feature::Enhancement => &["enhancement", "non_enhancement"],
            Feature::Cyst | Feature::Mass | Feature::Tumor => &["true", "false"],
            Feature::Size => &[],
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Feature {
    type Err = UnknownToken;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Feature::ALL
            .into_iter()
            .find(|f| f.key() == s || (s == "size" && *f == Feature::Size))
            .ok_or_else(|| UnknownToken {
                kind: "Feature",
                token: s.to_string(),
            })
    }
}

/// A reference such as "series 4 image 167".
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceRef {
    pub series_number: u32,
    /// 1-based position in the SliceLocation-sorted series.
    pub image_number: u32,
    #[serde(default = "default_plane")]
    pub plane: Plane,
    /// Sort the series by descending SliceLocation before indexing.
    #[serde(default, skip_serializing_if = "is_false")]
    pub descending: bool,
}

fn default_plane() -> Plane {
    Plane::Unknown
}

impl SliceRef {
    pub fn coronal(series_number: u32, image_number: u32) -> Self {
        SliceRef {
            series_number,
            image_number,
            plane: Plane::Coronal,
            descending: false,
        }
    }

    /// Only coronal references enter the curated cohort.
    pub fn flagged_for_exclusion(&self) -> bool {
        self.plane != Plane::Coronal
    }
}

impl fmt::Display for SliceRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "series {} image {}", self.series_number, self.image_number)
    }
}

/// The (report sentence, feature labels, CT slice) triplet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub annotation_id: String,
    pub patient_id: String,
    pub report_id: String,
    pub sentence: String,
    pub slice: SliceRef,
    pub features: FeatureSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_fold: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    schema_version: u32,
    provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortManifest {
    pub schema_version: u32,
    pub provenance: Provenance,
    pub annotations: Vec<Annotation>,
}

impl CohortManifest {
    pub fn new(provenance: Provenance, annotations: Vec<Annotation>) -> Self {
        CohortManifest {
            schema_version: SCHEMA_VERSION,
            provenance,
            annotations,
        }
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn get(&self, annotation_id: &str) -> Option<&Annotation> {
        self.annotations
            .iter()
            .find(|a| a.annotation_id == annotation_id)
    }

    /// Checks per-record invariants and id uniqueness.
    pub fn validate(&self) -> Result<(), ManifestError> {
        let mut seen = HashSet::new();
        for (i, a) in self.annotations.iter().enumerate() {
            let line = i + 1;
            if !seen.insert(a.annotation_id.as_str()) {
                return Err(ManifestError::DuplicateId {
                    line,
                    id: a.annotation_id.clone(),
                });
            }
            check_annotation(a).map_err(|v| ManifestError::Invalid {
                line,
                field: v.field.to_string(),
                rule: v.rule,
            })?;
        }
        Ok(())
    }
}

/// A broken invariant on one field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Every invariant violation in `f`; empty when the record is valid.
pub fn validate_feature_set(f: &FeatureSet) -> Vec<Violation> {
    let mut out = Vec::new();
    if let Some(size) = f.size_cm {
        if !size.is_finite() {
            out.push(Violation {
                field: "size_cm",
                rule: format!("must be finite, got {size}"),
            });
        } else if size <= 0.0 {
            out.push(Violation {
                field: "size_cm",
                rule: format!("must be strictly positive, got {size}"),
            });
        }
    }
    if f.raw_size.is_some() && f.size_cm.is_none() && !f.size_unparseable {
        out.push(Violation {
            field: "raw_size",
            rule: "raw_size present requires size_cm or size_unparseable".to_string(),
        });
    }
    if f.size_unparseable && f.size_cm.is_some() {
        out.push(Violation {
            field: "size_unparseable",
            rule: "cannot be set while size_cm is present".to_string(),
        });
    }
    out
}

fn check_annotation(a: &Annotation) -> Result<(), Violation> {
    if a.annotation_id.trim().is_empty() {
        return Err(Violation {
            field: "annotation_id",
            rule: "must be non-empty".into(),
        });
    }
    if a.sentence.trim().is_empty() {
        return Err(Violation {
            field: "sentence",
            rule: "must be non-empty".into(),
        });
    }
    if a.slice.image_number < 1 {
        return Err(Violation {
            field: "slice.image_number",
            rule: "must be >= 1".into(),
        });
    }
    if a.slice.series_number < 1 {
        return Err(Violation {
            field: "slice.series_number",
            rule: "must be >= 1".into(),
        });
    }
    match validate_feature_set(&a.features).into_iter().next() {
        Some(v) => Err(v),
        None => Ok(()),
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: field `{field}`: unknown token `{token}`")]
    UnknownToken {
        line: usize,
        field: String,
        token: String,
    },
    #[error("line {line}: field `{field}`: {message}")]
    Malformed {
        line: usize,
        field: String,
        message: String,
    },
    #[error("line {line}: field `{field}`: {rule}")]
    Invalid {
        line: usize,
        field: String,
        rule: String,
    },
    #[error("line {line}: duplicate annotation_id `{id}`")]
    DuplicateId { line: usize, id: String },
}

/// Parses manifest text. Line numbers in errors are 1-based file lines.
pub fn parse_manifest(text: &str) -> Result<CohortManifest, ManifestError> {
    let mut header: Option<ManifestHeader> = None;
    let mut annotations = Vec::new();
    let mut seen = HashSet::new();
    let mut first_record = true;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        if first_record {
            first_record = false;
            if is_header_line(raw) {
                header = Some(decode::<ManifestHeader>(raw, line)?);
                continue;
            }
        }
        let ann: Annotation = decode(raw, line)?;
        check_annotation(&ann).map_err(|v| ManifestError::Invalid {
            line,
            field: v.field.to_string(),
            rule: v.rule,
        })?;
        if !seen.insert(ann.annotation_id.clone()) {
            return Err(ManifestError::DuplicateId {
                line,
                id: ann.annotation_id,
            });
        }
        annotations.push(ann);
    }

    let header = header.unwrap_or(ManifestHeader {
        schema_version: SCHEMA_VERSION,
        provenance: Provenance::Real,
    });
    Ok(CohortManifest {
        schema_version: header.schema_version,
        provenance: header.provenance,
        annotations,
    })
}

fn is_header_line(raw: &str) -> bool {
    matches!(
        serde_json::from_str::<serde_json::Value>(raw),
        Ok(serde_json::Value::Object(ref m)) if m.contains_key("schema_version")
    )
}

fn decode<T: serde::de::DeserializeOwned>(raw: &str, line: usize) -> Result<T, ManifestError> {
    let mut de = serde_json::Deserializer::from_str(raw);
    serde_path_to_error::deserialize(&mut de).map_err(|err| {
        let field = err.path().to_string();
        let message = err.inner().to_string();
        match unknown_variant(&message) {
            Some(token) => ManifestError::UnknownToken { line, field, token },
            None => ManifestError::Malformed {
                line,
                field,
                message,
            },
        }
    })
}

fn unknown_variant(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown variant `")?;
    let end = rest.find('`')?;
    Some(rest[..end].to_string())
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<CohortManifest, ManifestError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_manifest(&text)
}

/// Renders the manifest as JSONL: header line first, then one annotation per line.
pub fn manifest_to_string(m: &CohortManifest) -> String {
    let mut out = String::new();
    let header = ManifestHeader {
        schema_version: m.schema_version,
        provenance: m.provenance,
    };
    out.push_str(&serde_json::to_string(&header).expect("header serializes"));
    out.push('\n');
    for a in &m.annotations {
        out.push_str(&serde_json::to_string(a).expect("annotation serializes"));
        out.push('\n');
    }
    out
}

pub fn save_manifest(m: &CohortManifest, path: impl AsRef<Path>) -> Result<(), ManifestError> {
    let path = path.as_ref();
    let io_err = |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(manifest_to_string(m).as_bytes())
        .and_then(|_| w.flush())
        .map_err(io_err)
}
