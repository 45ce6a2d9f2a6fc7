//! Report generation backends.
//!
//! [`HttpBackend`] speaks the OpenAI-compatible `chat/completions` protocol.
//! [`StubBackend`] answers locally and deterministically; it is selected by an
//! endpoint beginning with `stub:` (`stub:` or `stub:noisy?rate=0.3&seed=5`).

use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use futures::stream::{self, StreamExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::extract::{parse_report_rule_based, prompt2_json};
use crate::prompt::{embedded_text, format_size_cm, parse_feature_block, Modality, PromptKind, RenderedPrompt};
use crate::schema::{Attenuation, Enhancement, FeatureSet, Growth, Position};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    /// Base URL (the client appends `/chat/completions`) or a `stub:` spec.
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub max_concurrent_requests: usize,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            endpoint: "stub:".into(),
            model: "stub".into(),
            temperature: 0.0,
            max_tokens: 512,
            timeout_secs: 60.0,
            max_retries: 3,
            max_concurrent_requests: 4,
            api_key_env: None,
            backoff_base_ms: 500,
            backoff_max_ms: 8000,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: &str| Err(BackendError::Config(m.to_string()));
        if self.max_concurrent_requests < 1 {
            return bad("max_concurrent_requests must be at least 1");
        }
        if !(self.temperature >= 0.0) {
            return bad("temperature must be ≥ 0");
        }
        if !(self.timeout_secs > 0.0) {
            return bad("timeout_secs must be positive");
        }
        if self.endpoint.is_empty() {
            return bad("endpoint is empty");
        }
        Ok(())
    }
}

/// Provenance label of a generated report; it does not change how generation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMode {
    Ft,
    #[default]
    Zs,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedReport {
    pub annotation_id: String,
    pub text: String,
    pub modality: Modality,
    pub mode: GenerationMode,
    pub model: String,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: Option<Usage>,
    pub attempts: u32,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend config: {0}")]
    Config(String),
    #[error("request timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("empty completion")]
    EmptyCompletion,
    #[error("malformed response: {0}")]
    Malformed(String),
}

#[async_trait]
pub trait Backend: Send + Sync {
    async fn complete(&self, prompt: &RenderedPrompt) -> Result<Completion, BackendError>;

    fn model(&self) -> &str;
}

/// Backend for `cfg`: a stub for `stub:` endpoints, HTTP otherwise.
pub fn make_backend(cfg: &BackendConfig) -> Result<Arc<dyn Backend>, BackendError> {
    cfg.validate()?;
    if cfg.endpoint.starts_with("stub:") {
        Ok(Arc::new(StubBackend::from_endpoint(&cfg.endpoint, &cfg.model)?))
    } else {
        Ok(Arc::new(HttpBackend::new(cfg.clone())?))
    }
}

pub async fn generate(
    backend: &dyn Backend,
    prompt: &RenderedPrompt,
    annotation_id: &str,
    modality: Modality,
    mode: GenerationMode,
) -> Result<GeneratedReport, BackendError> {
    let start = Instant::now();
    let c = backend.complete(prompt).await?;
    Ok(GeneratedReport {
        annotation_id: annotation_id.to_string(),
        text: c.text,
        modality,
        mode,
        model: backend.model().to_string(),
        latency_ms: start.elapsed().as_millis() as u64,
        usage: c.usage,
    })
}

/// Runs many prompts with at most `max_concurrent` in flight; results keep input order.
pub async fn generate_batch(
    backend: Arc<dyn Backend>,
    items: Vec<(String, RenderedPrompt)>,
    modality: Modality,
    mode: GenerationMode,
    max_concurrent: usize,
) -> Vec<Result<GeneratedReport, BackendError>> {
    stream::iter(items)
        .map(|(id, prompt)| {
            let backend = Arc::clone(&backend);
            async move { generate(backend.as_ref(), &prompt, &id, modality, mode).await }
        })
        .buffered(max_concurrent.max(1))
        .collect()
        .await
}

/// Delay before retry `attempt` (1-based): `min(max, base · 2^(attempt−1))`
/// scaled by a jitter factor in [0.5, 1].
pub fn backoff_delay(cfg: &BackendConfig, attempt: u32, jitter: f64) -> Duration {
    let exp = cfg
        .backoff_base_ms
        .saturating_mul(1u64 << (attempt.saturating_sub(1)).min(30));
    let capped = exp.min(cfg.backoff_max_ms) as f64;
    Duration::from_millis((capped * (0.5 + 0.5 * jitter.clamp(0.0, 1.0))).round() as u64)
}

pub struct HttpBackend {
    cfg: BackendConfig,
    client: reqwest::Client,
    url: String,
    permits: Semaphore,
}

enum AttemptError {
    Retryable { timeout: bool, message: String },
    Fatal(BackendError),
}

impl HttpBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let url = format!("{}/chat/completions", cfg.endpoint.trim_end_matches('/'));
        let permits = Semaphore::new(cfg.max_concurrent_requests);
        Ok(HttpBackend {
            cfg,
            client,
            url,
            permits,
        })
    }

    pub fn request_body(&self, prompt: &RenderedPrompt) -> Value {
        let mut user = vec![json!({"type": "text", "text": prompt.user_text})];
        if let Some(uri) = &prompt.image_attachment {
            user.push(json!({"type": "image_url", "image_url": {"url": uri}}));
        }
        let mut messages = Vec::new();
        if !prompt.system_text.is_empty() {
            messages.push(json!({"role": "system", "content": prompt.system_text}));
        }
        messages.push(json!({"role": "user", "content": user}));
        json!({
            "model": self.cfg.model,
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_tokens,
            "messages": messages,
        })
    }

    async fn attempt(&self, body: &Value) -> Result<Completion, AttemptError> {
        let mut req = self.client.post(&self.url).json(body);
        if let Some(var) = &self.cfg.api_key_env {
            if let Ok(key) = std::env::var(var) {
                req = req.bearer_auth(key);
            }
        }
        let resp = req.send().await.map_err(|e| AttemptError::Retryable {
            timeout: e.is_timeout(),
            message: e.to_string(),
        })?;
        let status = resp.status();
        let text = resp.text().await.map_err(|e| AttemptError::Retryable {
            timeout: e.is_timeout(),
            message: e.to_string(),
        })?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(AttemptError::Retryable {
                timeout: false,
                message: format!("HTTP {}", status.as_u16()),
            });
        }
        if !status.is_success() {
            return Err(AttemptError::Fatal(BackendError::Http {
                status: status.as_u16(),
                body: text.chars().take(200).collect(),
            }));
        }
        parse_completion(&text).map_err(AttemptError::Fatal)
    }
}

fn parse_completion(body: &str) -> Result<Completion, BackendError> {
    let v: Value = serde_json::from_str(body).map_err(|e| BackendError::Malformed(e.to_string()))?;
    let content = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| BackendError::Malformed("no choices[0].message.content".into()))?;
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => return Err(BackendError::Malformed(format!("content is {other}"))),
    };
    if text.trim().is_empty() {
        return Err(BackendError::EmptyCompletion);
    }
    let usage = v.get("usage").and_then(|u| serde_json::from_value(u.clone()).ok());
    Ok(Completion {
        text,
        usage,
        attempts: 1,
    })
}

#[async_trait]
impl Backend for HttpBackend {
    async fn complete(&self, prompt: &RenderedPrompt) -> Result<Completion, BackendError> {
        let _permit = self.permits.acquire().await.expect("semaphore never closed");
        let body = self.request_body(prompt);
        let total = self.cfg.max_retries + 1;
        let mut last_timeout = false;
        let mut last_message = String::new();
        for attempt in 1..=total {
            match self.attempt(&body).await {
                Ok(mut c) => {
                    c.attempts = attempt;
                    return Ok(c);
                }
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Retryable { timeout, message }) => {
                    last_timeout = timeout;
                    last_message = message;
                    if attempt < total {
                        let delay = backoff_delay(&self.cfg, attempt, rand::thread_rng().gen());
                        tracing::warn!(
                            attempt,
                            max_attempts = total,
                            delay_ms = delay.as_millis() as u64,
                            timeout,
                            error = %last_message,
                            "retrying completion request"
                        );
                        tokio::time::sleep(delay).await;
                    }
                }
            }
        }
        if last_timeout {
            Err(BackendError::Timeout { attempts: total })
        } else {
            Err(BackendError::Transport {
                attempts: total,
                message: last_message,
            })
        }
    }

    fn model(&self) -> &str {
        &self.cfg.model
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StubMode {
    Exact,
    Noisy { rate: f64, seed: u64 },
}

/// Local deterministic backend. Generation prompts get [`stub_generate`] (or its
/// noisy variant) applied to their feature block; feature-extraction prompts get
/// the rule parser's reading of the embedded sentence as Prompt-2-style JSON;
/// sentence-extraction prompts get a keyword filter.
pub struct StubBackend {
    pub mode: StubMode,
    model: String,
}

impl StubBackend {
    pub fn new(mode: StubMode) -> Self {
        StubBackend {
            mode,
            model: "stub".into(),
        }
    }

    pub fn from_endpoint(endpoint: &str, model: &str) -> Result<Self, BackendError> {
        let spec = endpoint
            .strip_prefix("stub:")
            .ok_or_else(|| BackendError::Config(format!("not a stub endpoint: {endpoint}")))?;
        let mode = match spec.split_once('?') {
            None if spec.is_empty() => StubMode::Exact,
            Some(("noisy", query)) => {
                let (mut rate, mut seed) = (0.0, 0u64);
                for kv in query.split('&') {
                    match kv.split_once('=') {
                        Some(("rate", v)) => rate = v.parse().map_err(|_| BackendError::Config(format!("bad rate {v}")))?,
                        Some(("seed", v)) => seed = v.parse().map_err(|_| BackendError::Config(format!("bad seed {v}")))?,
                        _ => return Err(BackendError::Config(format!("bad stub parameter {kv}"))),
                    }
                }
                if !(0.0..=1.0).contains(&rate) {
                    return Err(BackendError::Config(format!("noise rate {rate} outside [0, 1]")));
                }
                StubMode::Noisy { rate, seed }
            }
            _ => return Err(BackendError::Config(format!("unknown stub spec {spec:?}"))),
        };
        Ok(StubBackend {
            mode,
            model: model.to_string(),
        })
    }

    pub fn respond(&self, prompt: &RenderedPrompt) -> String {
        match prompt.kind {
            PromptKind::ReportGeneration => {
                let f = parse_feature_block(&prompt.user_text).unwrap_or_else(FeatureSet::unknown);
                match self.mode {
                    StubMode::Exact => stub_generate(&f),
                    StubMode::Noisy { rate, seed } => {
                        noisy_stub_generate(&f, rate, seed ^ text_seed(&prompt.user_text))
                    }
                }
            }
            PromptKind::FeatureExtraction => {
                let sentence = embedded_text(&prompt.user_text).unwrap_or_default();
                prompt2_json(&parse_report_rule_based(&sentence).features)
            }
            PromptKind::SentenceExtraction => {
                renal_extracts(&embedded_text(&prompt.user_text).unwrap_or_default()).to_string()
            }
        }
    }
}

fn text_seed(text: &str) -> u64 {
    let d = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[async_trait]
impl Backend for StubBackend {
    async fn complete(&self, prompt: &RenderedPrompt) -> Result<Completion, BackendError> {
        Ok(Completion {
            text: self.respond(prompt),
            usage: None,
            attempts: 1,
        })
    }

    fn model(&self) -> &str {
        &self.model
    }
}

const RENAL_TERMS: [&str; 15] = [
    "kidney", "renal", "nephro", "ureter", "cyst", "calculi", "stone", "hydronephrosis", "parenchyma", "cortex",
    "medulla", "atrophy", "mass", "tumor", "lesion",
];
const ADRENAL_TERMS: [&str; 2] = ["adrenal", "suprarenal"];
const SECTIONS: [&str; 4] = ["HISTORY", "EXAM", "PRIOR STUDY", "FINDINGS"];

/// Keyword answer to the sentence-extraction prompt.
fn renal_extracts(report: &str) -> Value {
    let mut current: Option<&str> = None;
    let mut hits: Vec<(&str, Vec<String>)> = SECTIONS.iter().map(|s| (*s, Vec::new())).collect();
    for line in report.lines() {
        let mut body = line.trim();
        if let Some(sec) = SECTIONS.iter().find(|s| {
            body.strip_prefix(**s)
                .is_some_and(|rest| rest.trim_start().starts_with(':'))
        }) {
            current = Some(sec);
            body = body[sec.len()..].trim_start()[1..].trim();
        }
        let Some(sec) = current else { continue };
        for sentence in body.split_inclusive(". ").map(str::trim).filter(|s| !s.is_empty()) {
            let lower = sentence.to_lowercase();
            if RENAL_TERMS.iter().any(|t| lower.contains(t)) && !ADRENAL_TERMS.iter().any(|t| lower.contains(t)) {
                hits.iter_mut().find(|(s, _)| *s == sec).expect("known section").1.push(sentence.to_string());
            }
        }
    }
    let mut out = serde_json::Map::new();
    for (sec, found) in hits {
        let v = if found.is_empty() { "none".to_string() } else { found.join(" ") };
        out.insert(sec.to_string(), Value::String(v));
    }
    json!({ "renal_extracts": out })
}

fn lesion_vocab(cyst: bool, mass: bool, tumor: bool) -> Option<&'static str> {
    Some(match (cyst, mass, tumor) {
        (false, false, false) => return None,
        (true, false, false) => "cyst",
        (false, true, false) => "mass",
        (false, false, true) => "tumor",
        (true, true, false) => "complex cystic mass",
        (true, false, true) => "cystic lesion suspicious for tumor",
        (false, true, true) => "mass suspicious for tumor",
        (true, true, true) => "complex cystic mass suspicious for tumor",
    })
}

/// Fixed-grammar sentence for a feature set. Unknown fields drop their clause.
pub fn stub_generate(f: &FeatureSet) -> String {
    if f.is_empty() {
        return "No renal abnormality features specified.".to_string();
    }
    let mut words: Vec<String> = Vec::new();
    if let Some(cm) = f.size_cm {
        words.push(format!("{} cm", format_size_cm(cm)));
    }
    if f.exophytic != Growth::Unknown {
        words.push(f.exophytic.as_str().to_string());
    }
    if f.attenuation != Attenuation::Unknown {
        words.push(f.attenuation.as_str().to_string());
    }
    words.push("lesion".into());
    let article = if words[0].starts_with(['a', 'e', 'i', 'o', 'u']) { "an" } else { "a" };
    let mut s = format!("There is {article} {}", words.join(" "));
    match f.position {
        Position::Unknown => s.push_str(" in the kidney"),
        p => s.push_str(&format!(" in the {p} kidney")),
    }
    match f.enhancement {
        Enhancement::Enhancement => s.push_str(" demonstrating enhancement"),
        Enhancement::NonEnhancement => s.push_str(" demonstrating no enhancement"),
        Enhancement::Unknown => {}
    }
    if let Some(v) = lesion_vocab(f.cyst, f.mass, f.tumor) {
        s.push_str(&format!(", consistent with a {v}"));
    }
    s.push('.');
    s
}

fn other<T: Copy + PartialEq>(all: &[T], current: T, unknown: T, rng: &mut ChaCha8Rng) -> T {
    let choices: Vec<T> = all.iter().copied().filter(|&v| v != current && v != unknown).collect();
    choices[rng.gen_range(0..choices.len())]
}

/// [`stub_generate`] after corrupting each of the six clauses (size, growth,
/// attenuation, position, enhancement, lesion type) with probability
/// `noise_rate`. A corrupted clause with a known value is flipped or dropped
/// with equal odds; an absent clause is filled with a random value. Either way
/// the clause no longer matches its input.
pub fn noisy_stub_generate(f: &FeatureSet, noise_rate: f64, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = f.clone();
    let hit = |rng: &mut ChaCha8Rng| rng.gen_bool(noise_rate.clamp(0.0, 1.0));

    if hit(&mut rng) {
        g.size_cm = match f.size_cm {
            Some(cm) if rng.gen_bool(0.5) => {
                let delta = f64::from(rng.gen_range(1..=300u32)) / 100.0;
                Some(if rng.gen_bool(0.5) || cm - delta < 0.01 { cm + delta } else { cm - delta })
            }
            Some(_) => None,
            None => Some(f64::from(rng.gen_range(1..=800u32)) / 100.0),
        };
        g.raw_size = None;
    }
    if hit(&mut rng) {
        g.exophytic = if f.exophytic != Growth::Unknown && rng.gen_bool(0.5) {
            Growth::Unknown
        } else {
            other(Growth::ALL, f.exophytic, Growth::Unknown, &mut rng)
        };
    }
    if hit(&mut rng) {
        g.attenuation = if f.attenuation != Attenuation::Unknown && rng.gen_bool(0.5) {
            Attenuation::Unknown
        } else {
            other(Attenuation::ALL, f.attenuation, Attenuation::Unknown, &mut rng)
        };
    }
    if hit(&mut rng) {
        g.position = if f.position != Position::Unknown && rng.gen_bool(0.5) {
            Position::Unknown
        } else {
            other(Position::ALL, f.position, Position::Unknown, &mut rng)
        };
    }
    if hit(&mut rng) {
        g.enhancement = if f.enhancement != Enhancement::Unknown && rng.gen_bool(0.5) {
            Enhancement::Unknown
        } else {
            other(Enhancement::ALL, f.enhancement, Enhancement::Unknown, &mut rng)
        };
    }
    if hit(&mut rng) {
        let current = (f.cyst, f.mass, f.tumor);
        let next = if current != (false, false, false) && rng.gen_bool(0.5) {
            (false, false, false)
        } else {
            let combos: Vec<u8> = (1..8u8).filter(|&b| (b & 1 != 0, b & 2 != 0, b & 4 != 0) != current).collect();
            let b = combos[rng.gen_range(0..combos.len())];
            (b & 1 != 0, b & 2 != 0, b & 4 != 0)
        };
        (g.cyst, g.mass, g.tumor) = next;
    }
    stub_generate(&g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked() -> FeatureSet {
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

    #[test]
    fn grammar_on_worked_example() {
        assert_eq!(
            stub_generate(&worked()),
            "There is a 1.78 cm exophytic hypoattenuating lesion in the left kidney demonstrating enhancement, consistent with a cyst."
        );
    }

    #[test]
    fn grammar_edge_cases() {
        assert_eq!(stub_generate(&FeatureSet::unknown()), "No renal abnormality features specified.");
        let f = FeatureSet {
            cyst: true,
            mass: true,
            ..FeatureSet::unknown()
        };
        assert_eq!(stub_generate(&f), "There is a lesion in the kidney, consistent with a complex cystic mass.");
        let f = FeatureSet {
            exophytic: Growth::Endophytic,
            enhancement: Enhancement::NonEnhancement,
            ..FeatureSet::unknown()
        };
        assert_eq!(stub_generate(&f), "There is an endophytic lesion in the kidney demonstrating no enhancement.");
    }

    #[test]
    fn noise_extremes() {
        for seed in 0..20 {
            assert_eq!(noisy_stub_generate(&worked(), 0.0, seed), stub_generate(&worked()));
            let noisy = noisy_stub_generate(&worked(), 1.0, seed);
            let back = parse_report_rule_based(&noisy).features;
            let w = worked();
            assert_ne!(back.size_cm, w.size_cm);
            assert_ne!(back.exophytic, w.exophytic);
            assert_ne!(back.attenuation, w.attenuation);
            assert_ne!(back.position, w.position);
            assert_ne!(back.enhancement, w.enhancement);
            assert_ne!((back.cyst, back.mass, back.tumor), (w.cyst, w.mass, w.tumor));
        }
        assert_eq!(noisy_stub_generate(&worked(), 0.3, 42), noisy_stub_generate(&worked(), 0.3, 42));
    }

    #[test]
    fn stub_endpoint_parsing() {
        assert_eq!(StubBackend::from_endpoint("stub:", "m").unwrap().mode, StubMode::Exact);
        assert_eq!(
            StubBackend::from_endpoint("stub:noisy?rate=0.25&seed=9", "m").unwrap().mode,
            StubMode::Noisy { rate: 0.25, seed: 9 }
        );
        assert!(StubBackend::from_endpoint("stub:noisy?rate=2", "m").is_err());
        assert!(StubBackend::from_endpoint("stub:fancy", "m").is_err());
    }

    #[test]
    fn backoff_grows_and_caps() {
        let cfg = BackendConfig {
            backoff_base_ms: 100,
            backoff_max_ms: 1000,
            ..Default::default()
        };
        assert_eq!(backoff_delay(&cfg, 1, 1.0), Duration::from_millis(100));
        assert_eq!(backoff_delay(&cfg, 3, 1.0), Duration::from_millis(400));
        assert_eq!(backoff_delay(&cfg, 3, 0.0), Duration::from_millis(200));
        assert_eq!(backoff_delay(&cfg, 10, 1.0), Duration::from_millis(1000));
    }

    #[test]
    fn request_body_shape() {
        let b = HttpBackend::new(BackendConfig {
            endpoint: "http://localhost:1/v1/".into(),
            model: "m".into(),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(b.url, "http://localhost:1/v1/chat/completions");
        let p = RenderedPrompt {
            kind: PromptKind::ReportGeneration,
            system_text: "sys".into(),
            user_text: "hi".into(),
            image_attachment: Some("data:image/png;base64,AA==".into()),
            template_version: "t@1".into(),
        };
        let v = b.request_body(&p);
        assert_eq!(v["messages"][0]["role"], "system");
        assert_eq!(v["messages"][1]["content"][1]["image_url"]["url"], "data:image/png;base64,AA==");
        assert_eq!(v["temperature"], 0.0);
    }

    #[test]
    fn completion_parsing() {
        let ok = r#"{"choices":[{"message":{"content":"text"}}],"usage":{"prompt_tokens":3,"completion_tokens":1,"total_tokens":4}}"#;
        let c = parse_completion(ok).unwrap();
        assert_eq!(c.text, "text");
        assert_eq!(c.usage.unwrap().total_tokens, 4);
        assert!(matches!(
            parse_completion(r#"{"choices":[{"message":{"content":"  "}}]}"#),
            Err(BackendError::EmptyCompletion)
        ));
        assert!(matches!(parse_completion("{}"), Err(BackendError::Malformed(_))));
    }

    #[test]
    fn sentence_extraction_stub_filters_adrenal() {
        let v = renal_extracts(
            "HISTORY: Renal mass follow-up.\nFINDINGS: The adrenal glands are normal. A 2 cm cyst in the left kidney.",
        );
        assert_eq!(v["renal_extracts"]["HISTORY"], "Renal mass follow-up.");
        assert_eq!(v["renal_extracts"]["FINDINGS"], "A 2 cm cyst in the left kidney.");
        assert_eq!(v["renal_extracts"]["EXAM"], "none");
    }
}
