//! Feature re-extraction from report text.
//!
//! The rule parser is a keyword and pattern pass over one fixed vocabulary.
//! Negation ("no mass", "without enhancement") is scoped to the clause, meaning
//! text up to the next `,`, `;` or sentence end. For each field the first
//! mention wins. The LLM path renders the feature-extraction prompt, repairs
//! near-JSON replies, and maps the first abnormality block onto the schema.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::prompt::{render_feature_extraction_prompt, PromptError};
use crate::schema::{validate_feature_set, Attenuation, Enhancement, FeatureSet, Growth, Position};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMethod {
    Rule,
    Llm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    #[serde(default)]
    pub annotation_id: String,
    pub features: FeatureSet,
    pub method: ExtractionMethod,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unparsed: Vec<String>,
    /// Final model reply, kept for audit on the LLM path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_model_output: Option<String>,
}

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("no valid JSON after {attempts} attempts; last reply: {raw}")]
    InvalidJson { attempts: u32, raw: String },
    #[error("reply violates the feature schema ({}): {raw}", fields.join(", "))]
    Schema { fields: Vec<String>, raw: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

const NUM: &str = r"\d+(?:\.\d+)?";
const UNIT: &str = r"(?:cm|mm|centimeters?|millimeters?)";

static SIZE_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"(?i)\b{NUM}(?:\s*{UNIT})?(?:\s*(?:x|×|\*|by)\s*{NUM}(?:\s*{UNIT})?)*\s*{UNIT}\b"
    ))
    .expect("size pattern")
});
static LARGEST_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"(?i)(?:measur\w*\s+up\s+to|largest\s+(?:diameter|dimension)(?:\s+of)?|greatest\s+(?:diameter|dimension)(?:\s+of)?)\s+({NUM}\s*{UNIT})\b|\b({NUM}\s*{UNIT})\s+in\s+(?:greatest|largest|maximal|maximum)\s+(?:diameter|dimension)"
    ))
    .expect("largest-diameter pattern")
});
static NUM_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(NUM).expect("number pattern"));
static SUBCM_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bsub-?\s?centimet(?:er|re)\b").expect("subcm"));

/// Largest dimension of a size string in cm. Millimetres are converted;
/// "subcentimeter" maps to 0.5 cm. `None` when nothing parses.
pub fn standardize_size(raw: &str) -> Option<f64> {
    if SUBCM_RE.is_match(raw) {
        return Some(0.5);
    }
    let m = SIZE_RE.find(raw)?;
    let text = m.as_str().to_lowercase();
    let mm = text.trim_end().ends_with("mm") || text.trim_end().contains("millimet");
    let largest = NUM_RE
        .find_iter(&text)
        .filter_map(|n| n.as_str().parse::<f64>().ok())
        .fold(f64::NEG_INFINITY, f64::max);
    if !largest.is_finite() || largest <= 0.0 {
        return None;
    }
    // Integer arithmetic keeps "X cm" and "10·X mm" bit-identical.
    Some(if mm { (largest * 1000.0).round() / 10000.0 } else { largest })
}

static CLAUSE_SPLIT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[,;]|\.(?:\s|$)|\n").expect("clause split"));
static EXCLUDED: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(?:stones?|calculi|calculus|nephrolithiasis|hydronephrosis)\b").expect("excluded"));
static NEGATION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(?:no|without|not|negative\s+for)\b").expect("negation"));

static POSITION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(left|right)\s+(?:kidney|renal|kidneys)\b").expect("position"));
static GROWTH: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(exophytic|endophytic)\b").expect("growth"));
static ATTENUATION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\b(hypoattenuating|hypoattenuation|hypodense|low[\s-]attenuation|hyperattenuating|hyperattenuation|hyperdense|high[\s-]attenuation|denser\s+than\s+water|isoattenuating|isoattenuation|isodense)\b",
    )
    .expect("attenuation")
});
static NON_ENHANCING: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(?:non-?\s?enhanc\w*|(?:no|without)\s+(?:\w+\s+)?enhancement|(?:does|did)\s+not\s+enhance)\b")
        .expect("non-enhancement")
});
static ENHANCING: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\benhanc(?:ement|ing|es|ed)\b").expect("enhancement"));
static CYST: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bcyst(?:s|ic)?\b").expect("cyst"));
static MASS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bmass(?:es)?\b").expect("mass"));
static TUMOR: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(?:tumou?rs?|rcc|renal\s+cell\s+carcinoma|carcinoma|neoplasms?|neoplastic)\b").expect("tumor")
});

fn attenuation_of(word: &str) -> Attenuation {
    let w = word.to_lowercase();
    if w.starts_with("hypo") || w.starts_with("low") {
        Attenuation::Hypoattenuating
    } else if w.starts_with("iso") {
        Attenuation::Isoattenuating
    } else {
        Attenuation::Hyperattenuating
    }
}

/// True when a negation word precedes `start` within the clause.
fn negated(clause: &str, start: usize) -> bool {
    NEGATION.is_match(&clause[..start])
}

fn first_flag(clauses: &[&str], re: &Regex, notes: &mut Vec<String>, name: &str) -> bool {
    for c in clauses {
        for m in re.find_iter(c) {
            if negated(c, m.start()) {
                notes.push(format!("negated {name}: {:?}", c.trim()));
                continue;
            }
            return true;
        }
    }
    false
}

/// Deterministic keyword extraction. Absent evidence leaves a field unknown or false.
pub fn parse_report_rule_based(text: &str) -> ExtractionResult {
    let mut notes = Vec::new();
    let mut unparsed = Vec::new();
    let clauses: Vec<&str> = CLAUSE_SPLIT
        .split(text)
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .filter(|c| {
            let skip = EXCLUDED.is_match(c);
            if skip {
                notes.push(format!("excluded finding: {c:?}"));
            }
            !skip
        })
        .collect();

    let mut f = FeatureSet::unknown();
    let first = |re: &Regex| clauses.iter().find_map(|c| re.captures(c).map(|cap| cap[1].to_lowercase()));
    if let Some(side) = first(&POSITION) {
        f.position = side.parse().expect("left or right");
    }
    if let Some(g) = first(&GROWTH) {
        f.exophytic = g.parse().expect("exophytic or endophytic");
    }
    if let Some(a) = first(&ATTENUATION) {
        f.attenuation = attenuation_of(&a);
    }
    for c in &clauses {
        if NON_ENHANCING.is_match(c) {
            f.enhancement = Enhancement::NonEnhancement;
            break;
        }
        if let Some(m) = ENHANCING.find(c) {
            f.enhancement = if negated(c, m.start()) {
                Enhancement::NonEnhancement
            } else {
                Enhancement::Enhancement
            };
            break;
        }
    }
    f.cyst = first_flag(&clauses, &CYST, &mut notes, "cyst");
    f.mass = first_flag(&clauses, &MASS, &mut notes, "mass");
    f.tumor = first_flag(&clauses, &TUMOR, &mut notes, "tumor");

    let joined = clauses.join(", ");
    if let Some(cap) = LARGEST_RE.captures(&joined) {
        let raw = cap.get(1).or_else(|| cap.get(2)).expect("one branch matched").as_str();
        f.raw_size = Some(raw.to_string());
        f.size_cm = standardize_size(raw);
        notes.push("size from stated largest diameter".into());
    } else if let Some(m) = SIZE_RE.find(&joined) {
        f.raw_size = Some(m.as_str().to_string());
        f.size_cm = standardize_size(m.as_str());
    } else if let Some(m) = SUBCM_RE.find(&joined) {
        f.raw_size = Some(m.as_str().to_string());
        f.size_cm = Some(0.5);
    }
    if f.raw_size.is_some() && f.size_cm.is_none() {
        f.size_unparseable = true;
    }

    let any_term = [&*POSITION, &*GROWTH, &*ATTENUATION, &*ENHANCING, &*NON_ENHANCING, &*CYST, &*MASS, &*TUMOR, &*SIZE_RE];
    for c in &clauses {
        if !any_term.iter().any(|re| re.is_match(c)) && !c.to_lowercase().contains("lesion") {
            unparsed.push(c.to_string());
        }
    }

    ExtractionResult {
        annotation_id: String::new(),
        features: f,
        method: ExtractionMethod::Rule,
        notes,
        unparsed,
        raw_model_output: None,
    }
}

fn capitalized(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|h| h.to_uppercase().chain(c).collect()).unwrap_or_default()
}

/// Feature set in the feature-extraction prompt's output shape (strict JSON).
pub fn prompt2_json(f: &FeatureSet) -> String {
    if f.is_empty() {
        return r#"{"Abnormality": false}"#.to_string();
    }
    let q = |s: &str| serde_json::to_string(s).expect("strings serialize");
    let size = f.size_cm.map_or_else(|| q("unknown"), |x| x.to_string());
    let raw = f.raw_size.as_deref().unwrap_or("unknown");
    let attenuation = if f.attenuation == Attenuation::Unknown {
        "unknown".to_string()
    } else {
        capitalized(f.attenuation.as_str())
    };
    format!(
        "{{\n \"Abnormality\": true,\n \"Abnormality_Info\": [\n   {{\n     \"Position\": {},\n     \"Raw_Size\": {},\n     \"Size_cm\": {},\n     \"Exophytic\": {},\n     \"Attenuation\": {},\n     \"Enhancement\": {},\n     \"Lesion\": true,\n     \"Cyst\": {},\n     \"Mass\": {},\n     \"Tumor\": {}\n   }}\n ]\n}}",
        q(f.position.as_str()),
        q(raw),
        size,
        q(f.exophytic.as_str()),
        q(&attenuation),
        q(f.enhancement.as_str()),
        f.cyst,
        f.mass,
        f.tumor
    )
}

static TRAILING_COMMA: LazyLock<Regex> = LazyLock::new(|| Regex::new(r",(\s*[}\]])").expect("trailing comma"));

/// Parses a model reply as JSON after stripping code fences, surrounding prose
/// and trailing commas.
pub fn repair_json(reply: &str) -> Option<Value> {
    let start = reply.find('{')?;
    let end = reply.rfind('}')?;
    if end < start {
        return None;
    }
    let body = &reply[start..=end];
    serde_json::from_str(body)
        .ok()
        .or_else(|| serde_json::from_str(&TRAILING_COMMA.replace_all(body, "$1")).ok())
}

fn text_field(block: &Value, key: &str) -> Option<String> {
    match block.get(key)? {
        Value::String(s) => Some(s.trim().to_string()),
        Value::Null => None,
        other => Some(other.to_string()),
    }
}

fn known(s: Option<String>) -> Option<String> {
    s.filter(|v| !v.is_empty() && !v.eq_ignore_ascii_case("unknown") && !v.eq_ignore_ascii_case("none"))
}

/// Maps a parsed reply onto the schema. `Err(None)` means the reply has the
/// wrong shape (worth a retry); `Err(Some(fields))` lists schema violations.
fn map_reply(v: &Value) -> Result<FeatureSet, Option<Vec<String>>> {
    let abnormal = v.get("Abnormality").and_then(Value::as_bool).ok_or(None)?;
    if !abnormal {
        return Ok(FeatureSet::unknown());
    }
    let block = match v.get("Abnormality_Info") {
        Some(Value::Array(items)) => items.first().ok_or(None)?,
        Some(obj @ Value::Object(_)) => obj,
        _ => return Err(None),
    };
    let mut bad = Vec::new();
    let mut f = FeatureSet::unknown();

    if let Some(p) = known(text_field(block, "Position")) {
        match p.to_lowercase().parse::<Position>() {
            Ok(p) => f.position = p,
            Err(_) => bad.push(format!("Position={p:?}")),
        }
    }
    if let Some(g) = known(text_field(block, "Exophytic")) {
        match g.to_lowercase().parse::<Growth>() {
            Ok(g) => f.exophytic = g,
            Err(_) => bad.push(format!("Exophytic={g:?}")),
        }
    }
    if let Some(a) = known(text_field(block, "Attenuation")) {
        match ATTENUATION.captures(&a) {
            Some(cap) if cap[0].len() == a.len() => f.attenuation = attenuation_of(&cap[1]),
            _ => bad.push(format!("Attenuation={a:?}")),
        }
    }
    if let Some(e) = known(text_field(block, "Enhancement")) {
        let norm = e.to_lowercase().replace(['-', ' '], "_");
        f.enhancement = match norm.as_str() {
            "enhancement" | "enhancing" => Enhancement::Enhancement,
            "non_enhancement" | "nonenhancement" | "non_enhancing" | "nonenhancing" | "no_enhancement" => {
                Enhancement::NonEnhancement
            }
            _ => {
                bad.push(format!("Enhancement={e:?}"));
                Enhancement::Unknown
            }
        };
    }
    for (key, slot) in [("Cyst", &mut f.cyst), ("Mass", &mut f.mass), ("Tumor", &mut f.tumor)] {
        match block.get(key) {
            None | Some(Value::Null) => {}
            Some(Value::Bool(b)) => *slot = *b,
            Some(Value::String(s)) if s.eq_ignore_ascii_case("true") => *slot = true,
            Some(Value::String(s)) if s.eq_ignore_ascii_case("false") || s.eq_ignore_ascii_case("unknown") => {}
            Some(other) => bad.push(format!("{key}={other}")),
        }
    }
    f.raw_size = known(text_field(block, "Raw_Size"));
    match block.get("Size_cm") {
        Some(Value::Number(n)) => f.size_cm = n.as_f64(),
        Some(Value::String(s)) if known(Some(s.clone())).is_some() => match s.trim().parse::<f64>() {
            Ok(x) => f.size_cm = Some(x),
            Err(_) => f.size_cm = standardize_size(s),
        },
        None | Some(Value::Null) | Some(Value::String(_)) => {}
        Some(other) => bad.push(format!("Size_cm={other}")),
    }
    if f.size_cm.is_none() {
        if let Some(raw) = &f.raw_size {
            f.size_cm = standardize_size(raw);
            f.size_unparseable = f.size_cm.is_none();
        }
    }
    bad.extend(validate_feature_set(&f).iter().map(ToString::to_string));
    if bad.is_empty() {
        Ok(f)
    } else {
        Err(Some(bad))
    }
}

/// Appended to the prompt after a reply that is not the requested JSON.
pub const REPAIR_INSTRUCTION: &str =
    "Your previous reply was not valid JSON in the requested format. Reply with only the JSON object described above.";
/// Extra attempts after the first malformed reply.
pub const JSON_RETRIES: u32 = 2;

/// LLM-backed extraction through the feature-extraction prompt.
pub async fn parse_report_llm(text: &str, backend: &dyn Backend) -> Result<ExtractionResult, ExtractError> {
    if text.trim().is_empty() {
        return Ok(ExtractionResult {
            annotation_id: String::new(),
            features: FeatureSet::unknown(),
            method: ExtractionMethod::Llm,
            notes: vec!["empty text".into()],
            unparsed: Vec::new(),
            raw_model_output: None,
        });
    }
    let mut prompt = render_feature_extraction_prompt(text)?;
    let mut raw = String::new();
    for attempt in 1..=JSON_RETRIES + 1 {
        raw = backend.complete(&prompt).await?.text;
        match repair_json(&raw).as_ref().map(map_reply) {
            Some(Ok(features)) => {
                let mut notes = Vec::new();
                if attempt > 1 {
                    notes.push(format!("valid JSON on attempt {attempt}"));
                }
                return Ok(ExtractionResult {
                    annotation_id: String::new(),
                    features,
                    method: ExtractionMethod::Llm,
                    notes,
                    unparsed: Vec::new(),
                    raw_model_output: Some(raw),
                });
            }
            Some(Err(Some(fields))) => return Err(ExtractError::Schema { fields, raw }),
            Some(Err(None)) | None => {
                tracing::warn!(attempt, "malformed extraction reply");
                if attempt == 1 {
                    prompt.user_text.push_str("\n\n");
                    prompt.user_text.push_str(REPAIR_INSTRUCTION);
                }
            }
        }
    }
    Err(ExtractError::InvalidJson {
        attempts: JSON_RETRIES + 1,
        raw,
    })
}
