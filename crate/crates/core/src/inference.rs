//! Prompts, response collection and the replay store.
//!
//! Responses come from one of three sources: a chat-completions endpoint,
//! a replay log of earlier responses, or a scripted agent. Whatever the
//! source, [`run_inference`] returns one [`RawResponse`] per
//! (model, item, condition), sorted, with failures kept as placeholders.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use base64::Engine;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{self, AgentSpec};
use crate::corpus::{EvaluationItem, ImageRef};
use crate::io::{self, IoError};

const DEFAULT_TEMPLATE: &str = include_str!("../assets/prompt.v1.toml");

/// Abort threshold: a run fails when more than this share of requests fail.
pub const MAX_FAILURE_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Real,
    Blank,
    Shuffle,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Real, Condition::Blank, Condition::Shuffle];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Real => "real",
            Condition::Blank => "blank",
            Condition::Shuffle => "shuffle",
        }
    }

    pub fn image(self, item: &EvaluationItem) -> &ImageRef {
        match self {
            Condition::Real => &item.real_image,
            Condition::Blank => &item.blank_image,
            Condition::Shuffle => &item.shuffle_image,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "real" => Ok(Condition::Real),
            "blank" => Ok(Condition::Blank),
            "shuffle" => Ok(Condition::Shuffle),
            other => Err(format!("unknown condition \"{other}\"")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("prompt template: {0}")]
    Template(String),
    #[error("endpoint config: {0}")]
    Config(String),
    #[error("environment variable {0} holding the auth token is not set")]
    MissingToken(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("HTTP {status} (not retried): {excerpt}")]
    Permanent { status: u16, excerpt: String },
    #[error("malformed completion: {0}")]
    Malformed(String),
    #[error("image: {0}")]
    Image(String),
    #[error("replay store has no response for item={item_id} model={model_id} condition={condition}")]
    MissingKey {
        item_id: String,
        model_id: String,
        condition: Condition,
    },
    #[error("replay store has two responses for item={item_id} model={model_id} condition={condition}")]
    DuplicateKey {
        item_id: String,
        model_id: String,
        condition: Condition,
    },
    #[error("{failed} of {total} requests failed (limit 10%); first failures: {summary}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        summary: String,
    },
}

/// System/user skeletons with `{question}` and `{options}` placeholders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub version: String,
    pub system: String,
    pub user: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::from_toml_str(DEFAULT_TEMPLATE).expect("shipped prompt template is valid")
    }
}

impl PromptTemplate {
    pub fn from_toml_str(text: &str) -> Result<Self, InferenceError> {
        toml::from_str(text).map_err(|e| InferenceError::Template(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, InferenceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| InferenceError::Template(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptSpec {
    pub system_text: String,
    pub user_text: String,
    pub image: ImageRef,
    pub decode_params: DecodeParams,
}

impl PromptSpec {
    /// Content hash over text, image identity and decoding parameters.
    pub fn prompt_hash(&self) -> u64 {
        let key = serde_json::json!([
            self.system_text,
            self.user_text,
            self.image.fingerprint(),
            self.decode_params.temperature,
            self.decode_params.max_tokens,
        ]);
        io::hash64(key.to_string().as_bytes())
    }
}

pub fn format_prompt_hash(hash: u64) -> String {
    format!("{hash:016x}")
}

fn render(skeleton: &str, question: &str, options: &str) -> Result<String, InferenceError> {
    let mut rest = skeleton;
    while let Some(start) = rest.find('{') {
        let tail = &rest[start + 1..];
        let Some(len) = tail.find('}') else { break };
        let name = &tail[..len];
        let identifier = !name.is_empty() && name.chars().all(|c| c.is_alphanumeric() || c == '_');
        if identifier && name != "question" && name != "options" {
            return Err(InferenceError::Template(format!("unresolved placeholder {{{name}}}")));
        }
        rest = tail;
    }
    let text = if options.is_empty() {
        skeleton.replace("{options}\n", "").replace("{options}", "")
    } else {
        skeleton.replace("{options}", "\u{0}options\u{0}")
    };
    // Split on the question marker first so neither substituted value is
    // scanned for the other's placeholder.
    let text = text
        .split("{question}")
        .map(|part| part.replace("\u{0}options\u{0}", options))
        .collect::<Vec<_>>()
        .join(question);
    Ok(text)
}

/// Lettered option lines, `A. first` .. `Z. last`.
pub fn render_options(options: &[String]) -> String {
    options
        .iter()
        .zip('A'..='Z')
        .map(|(text, letter)| format!("{letter}. {text}"))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn build_prompt(
    item: &EvaluationItem,
    condition: Condition,
    template: &PromptTemplate,
    decode_params: DecodeParams,
) -> Result<PromptSpec, InferenceError> {
    let options = item
        .base
        .answer_options
        .as_deref()
        .map(render_options)
        .unwrap_or_default();
    let user_text = render(&template.user, &item.base.question, &options)?;
    let system_text = render(&template.system, &item.base.question, &options)?;
    if !(user_text.contains("<think>") && user_text.contains("<answer>")) {
        return Err(InferenceError::Template(
            "user skeleton must instruct the <think> and <answer> tags".into(),
        ));
    }
    Ok(PromptSpec {
        system_text,
        user_text,
        image: condition.image(item).clone(),
        decode_params,
    })
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// One model output for one (item, condition).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawResponse {
    pub item_id: String,
    pub model_id: String,
    pub condition: Condition,
    pub text: String,
    pub latency_ms: u64,
    /// 64-bit prompt hash as 16 lowercase hex digits.
    pub prompt_hash: String,
    #[serde(default, skip_serializing_if = "is_false")]
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RawResponse {
    pub fn failure(
        item_id: String,
        model_id: String,
        condition: Condition,
        prompt_hash: String,
        error: String,
    ) -> Self {
        RawResponse {
            item_id,
            model_id,
            condition,
            text: String::new(),
            latency_ms: 0,
            prompt_hash,
            failed: true,
            error: Some(error),
        }
    }

    pub fn sort_key(&self) -> (&str, &str, Condition) {
        (&self.model_id, &self.item_id, self.condition)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_token_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    /// First retry delay; doubles on every further attempt.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

fn default_timeout() -> f64 {
    120.0
}
fn default_retries() -> u32 {
    3
}
fn default_parallel() -> usize {
    4
}
fn default_backoff() -> u64 {
    500
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            model_name: model_name.into(),
            auth_token_env: None,
            timeout_s: default_timeout(),
            max_retries: default_retries(),
            max_parallel: default_parallel(),
            backoff_ms: default_backoff(),
        }
    }

    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.max_parallel == 0 {
            return Err(InferenceError::Config("max_parallel must be at least 1".into()));
        }
        if !(self.timeout_s > 0.0) {
            return Err(InferenceError::Config("timeout_s must be positive".into()));
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(InferenceError::Config(format!(
                "base_url \"{}\" is not an http(s) URL",
                self.base_url
            )));
        }
        Ok(())
    }

    fn completions_url(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

/// Text and timing of one successful completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub latency_ms: u64,
    pub attempts: u32,
}

fn request_body(cfg: &EndpointConfig, prompt: &PromptSpec) -> Result<serde_json::Value, InferenceError> {
    let (bytes, mime) = prompt.image.materialize().map_err(InferenceError::Image)?;
    let data_url = format!(
        "data:{mime};base64,{}",
        base64::engine::general_purpose::STANDARD.encode(bytes)
    );
    Ok(serde_json::json!({
        "model": cfg.model_name,
        "messages": [
            {"role": "system", "content": prompt.system_text},
            {"role": "user", "content": [
                {"type": "text", "text": prompt.user_text},
                {"type": "image_url", "image_url": {"url": data_url}},
            ]},
        ],
        "temperature": prompt.decode_params.temperature,
        "max_tokens": prompt.decode_params.max_tokens,
    }))
}

fn completion_text(body: &str) -> Result<String, InferenceError> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| InferenceError::Malformed(e.to_string()))?;
    let content = &value["choices"][0]["message"]["content"];
    match content {
        serde_json::Value::String(s) => Ok(s.clone()),
        serde_json::Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join("")),
        _ => Err(InferenceError::Malformed(
            "response has no choices[0].message.content".into(),
        )),
    }
}

fn excerpt(body: &str) -> String {
    body.chars().take(200).collect()
}

/// Sends one prompt, retrying transport errors, timeouts, 429 and 5xx with
/// exponential backoff. Other 4xx statuses fail immediately.
pub fn query_model(cfg: &EndpointConfig, prompt: &PromptSpec) -> Result<Completion, InferenceError> {
    cfg.validate()?;
    let token = match &cfg.auth_token_env {
        Some(var) => Some(std::env::var(var).map_err(|_| InferenceError::MissingToken(var.clone()))?),
        None => None,
    };
    let body = request_body(cfg, prompt)?;
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_s)))
        .http_status_as_error(false)
        .build()
        .into();
    let url = cfg.completions_url();
    let started = Instant::now();
    let mut attempt = 0u32;
    loop {
        attempt += 1;
        let mut request = agent.post(&url);
        if let Some(token) = &token {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let failure = match request.send_json(&body) {
            Ok(mut response) => {
                let status = response.status().as_u16();
                let text = response
                    .body_mut()
                    .read_to_string()
                    .map_err(|e| e.to_string());
                match (status, text) {
                    (200..=299, Ok(text)) => {
                        return Ok(Completion {
                            text: completion_text(&text)?,
                            latency_ms: started.elapsed().as_millis() as u64,
                            attempts: attempt,
                        })
                    }
                    (200..=299, Err(e)) => e,
                    (429 | 500..=599, text) => {
                        format!("HTTP {status}: {}", excerpt(&text.unwrap_or_default()))
                    }
                    (_, text) => {
                        return Err(InferenceError::Permanent {
                            status,
                            excerpt: excerpt(&text.unwrap_or_default()),
                        })
                    }
                }
            }
            Err(e) => e.to_string(),
        };
        if attempt > cfg.max_retries {
            return Err(InferenceError::Transport {
                attempts: attempt,
                message: failure,
            });
        }
        let delay = cfg.backoff_ms.saturating_mul(1u64 << (attempt - 1).min(16));
        log::debug!("attempt {attempt} failed ({failure}); retrying in {delay} ms");
        std::thread::sleep(Duration::from_millis(delay));
    }
}

type ReplayKey = (String, String, Condition);

/// Previously collected responses keyed by (item_id, model_id, condition).
#[derive(Debug, Clone, Default)]
pub struct ReplayStore {
    records: BTreeMap<ReplayKey, RawResponse>,
}

impl ReplayStore {
    pub fn from_records(records: Vec<RawResponse>) -> Result<Self, InferenceError> {
        let mut map = BTreeMap::new();
        for record in records {
            let key = (record.item_id.clone(), record.model_id.clone(), record.condition);
            if map.contains_key(&key) {
                return Err(InferenceError::DuplicateKey {
                    item_id: key.0,
                    model_id: key.1,
                    condition: key.2,
                });
            }
            map.insert(key, record);
        }
        Ok(ReplayStore { records: map })
    }

    pub fn load(path: &Path) -> Result<Self, InferenceError> {
        Self::from_records(io::read_jsonl(path)?)
    }

    pub fn lookup(
        &self,
        item_id: &str,
        model_id: &str,
        condition: Condition,
    ) -> Result<&RawResponse, InferenceError> {
        self.records
            .get(&(item_id.to_string(), model_id.to_string(), condition))
            .ok_or_else(|| InferenceError::MissingKey {
                item_id: item_id.to_string(),
                model_id: model_id.to_string(),
                condition,
            })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn model_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.records.keys().map(|k| k.1.clone()).collect();
        ids.dedup();
        ids.sort();
        ids.dedup();
        ids
    }
}

#[derive(Debug, Clone)]
pub enum ResponseSource {
    Endpoint(EndpointConfig),
    Replay(std::sync::Arc<ReplayStore>),
    Agent(AgentSpec),
}

#[derive(Debug, Clone)]
pub struct ModelSource {
    pub model_id: String,
    pub source: ResponseSource,
}

#[derive(Debug, Clone)]
pub struct InferenceOptions {
    pub template: PromptTemplate,
    pub decode_params: DecodeParams,
    /// Worker threads for replay and agent sources. Endpoints use their own
    /// `max_parallel`.
    pub max_parallel: usize,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            template: PromptTemplate::default(),
            decode_params: DecodeParams::default(),
            max_parallel: 1,
        }
    }
}

fn respond(
    model: &ModelSource,
    item: &EvaluationItem,
    condition: Condition,
    options: &InferenceOptions,
) -> RawResponse {
    let item_id = item.item_id();
    let prompt = match build_prompt(item, condition, &options.template, options.decode_params) {
        Ok(prompt) => prompt,
        Err(e) => {
            return RawResponse::failure(item_id, model.model_id.clone(), condition, String::new(), e.to_string())
        }
    };
    let prompt_hash = format_prompt_hash(prompt.prompt_hash());
    let outcome = match &model.source {
        ResponseSource::Endpoint(cfg) => query_model(cfg, &prompt).map(|c| (c.text, c.latency_ms)),
        ResponseSource::Replay(store) => {
            return match store.lookup(&item_id, &model.model_id, condition) {
                Ok(found) => found.clone(),
                Err(e) => RawResponse::failure(item_id, model.model_id.clone(), condition, prompt_hash, e.to_string()),
            }
        }
        ResponseSource::Agent(spec) => Ok((agents::generate(spec, item, condition), 0)),
    };
    match outcome {
        Ok((text, latency_ms)) => RawResponse {
            item_id,
            model_id: model.model_id.clone(),
            condition,
            text,
            latency_ms,
            prompt_hash,
            failed: false,
            error: None,
        },
        Err(e) => RawResponse::failure(item_id, model.model_id.clone(), condition, prompt_hash, e.to_string()),
    }
}

/// Collects `items × models × 3` responses sorted by (model, item, condition).
///
/// Failed requests become placeholders with `failed = true`. The run is
/// rejected when more than 10% of requests fail.
pub fn run_inference(
    items: &[EvaluationItem],
    models: &[ModelSource],
    options: &InferenceOptions,
) -> Result<Vec<RawResponse>, InferenceError> {
    let mut all = Vec::with_capacity(items.len() * models.len() * 3);
    for model in models {
        let threads = match &model.source {
            ResponseSource::Endpoint(cfg) => {
                cfg.validate()?;
                cfg.max_parallel
            }
            _ => options.max_parallel.max(1),
        };
        let tasks: Vec<(&EvaluationItem, Condition)> = items
            .iter()
            .flat_map(|item| Condition::ALL.into_iter().map(move |c| (item, c)))
            .collect();
        let responses: Vec<RawResponse> = if threads == 1 {
            tasks.iter().map(|&(item, c)| respond(model, item, c, options)).collect()
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| InferenceError::Config(e.to_string()))?;
            pool.install(|| {
                tasks
                    .par_iter()
                    .map(|&(item, c)| respond(model, item, c, options))
                    .collect()
            })
        };
        all.extend(responses);
    }
    all.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));

    let failures: Vec<&RawResponse> = all.iter().filter(|r| r.failed).collect();
    if !failures.is_empty() {
        log::warn!("{} of {} requests failed", failures.len(), all.len());
    }
    if failures.len() as f64 > MAX_FAILURE_FRACTION * all.len() as f64 {
        let summary = failures
            .iter()
            .take(3)
            .map(|r| {
                format!(
                    "{}/{}/{}: {}",
                    r.model_id,
                    r.item_id,
                    r.condition,
                    r.error.as_deref().unwrap_or("")
                )
            })
            .collect::<Vec<_>>()
            .join("; ");
        return Err(InferenceError::TooManyFailures {
            failed: failures.len(),
            total: all.len(),
            summary,
        });
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_blank_image, BenchmarkExample, ImageKind};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn item(id: &str, options: Option<Vec<&str>>) -> EvaluationItem {
        let base = BenchmarkExample {
            example_id: id.into(),
            question: "Which organ is enlarged?".into(),
            image: ImageRef::inline_base64("AAAA"),
            gold_answer: "Spleen".into(),
            answer_options: options.map(|o| o.into_iter().map(String::from).collect()),
            modality: None,
            benchmark_id: "bench".into(),
        };
        EvaluationItem {
            real_image: base.image.clone(),
            blank_image: make_blank_image(),
            shuffle_image: ImageRef::inline_base64("BBBB"),
            shuffle_source_id: "other".into(),
            sample_seed: 7,
            base,
        }
    }

    #[test]
    fn blank_prompt_lists_lettered_options() {
        let it = item("q1", Some(vec!["Liver", "Spleen", "Kidney", "Heart"]));
        let p = build_prompt(&it, Condition::Blank, &PromptTemplate::default(), DecodeParams::default()).unwrap();
        assert_eq!(p.image.kind, ImageKind::SyntheticBlank);
        assert!(p.user_text.contains("A. Liver\nB. Spleen\nC. Kidney\nD. Heart"));
        assert!(p.user_text.contains("<think>") && p.user_text.contains("<answer>"));
        assert_eq!(p.decode_params.temperature, 0.0);
        assert_eq!(p.decode_params.max_tokens, 1024);
    }

    #[test]
    fn text_is_identical_across_real_and_shuffle() {
        let it = item("q1", None);
        let t = PromptTemplate::default();
        let real = build_prompt(&it, Condition::Real, &t, DecodeParams::default()).unwrap();
        let shuffle = build_prompt(&it, Condition::Shuffle, &t, DecodeParams::default()).unwrap();
        assert_eq!(real.user_text, shuffle.user_text);
        assert_ne!(real.image, shuffle.image);
        assert_ne!(real.prompt_hash(), shuffle.prompt_hash());
        assert!(!real.user_text.contains("{options}"));
    }

    #[test]
    fn prompt_hash_is_stable() {
        let it = item("q1", None);
        let t = PromptTemplate::default();
        let a = build_prompt(&it, Condition::Real, &t, DecodeParams::default()).unwrap();
        let b = build_prompt(&it, Condition::Real, &t, DecodeParams::default()).unwrap();
        assert_eq!(a.prompt_hash(), b.prompt_hash());
        assert_eq!(format_prompt_hash(a.prompt_hash()).len(), 16);
    }

    #[test]
    fn unresolved_placeholder_is_rejected() {
        let t = PromptTemplate {
            version: "t".into(),
            system: "sys".into(),
            user: "{question} {modality} <think></think><answer></answer>".into(),
        };
        let err = build_prompt(&item("q", None), Condition::Real, &t, DecodeParams::default()).unwrap_err();
        assert!(err.to_string().contains("{modality}"));
    }

    #[test]
    fn braces_in_question_are_not_placeholders() {
        let mut it = item("q", None);
        it.base.question = "Is {this} set notation?".into();
        let p = build_prompt(&it, Condition::Real, &PromptTemplate::default(), DecodeParams::default()).unwrap();
        assert!(p.user_text.starts_with("Is {this} set notation?"));
    }

    fn response(item: &str, model: &str, c: Condition, text: &str) -> RawResponse {
        RawResponse {
            item_id: item.into(),
            model_id: model.into(),
            condition: c,
            text: text.into(),
            latency_ms: 1,
            prompt_hash: "0".repeat(16),
            failed: false,
            error: None,
        }
    }

    #[test]
    fn replay_lookup_and_errors() {
        let store = ReplayStore::from_records(vec![response("b/q1", "m", Condition::Real, "x")]).unwrap();
        assert_eq!(store.lookup("b/q1", "m", Condition::Real).unwrap().text, "x");
        let err = store.lookup("b/q1", "m", Condition::Blank).unwrap_err();
        assert!(err.to_string().contains("condition=blank"));
        let dup = ReplayStore::from_records(vec![
            response("b/q1", "m", Condition::Real, "x"),
            response("b/q1", "m", Condition::Real, "y"),
        ]);
        assert!(matches!(dup, Err(InferenceError::DuplicateKey { .. })));
    }

    #[test]
    fn one_item_one_model_gives_three_sorted_responses() {
        let it = item("q1", None);
        let records: Vec<RawResponse> = Condition::ALL
            .iter()
            .rev()
            .map(|&c| response(&it.item_id(), "m", c, c.as_str()))
            .collect();
        let models = [ModelSource {
            model_id: "m".into(),
            source: ResponseSource::Replay(Arc::new(ReplayStore::from_records(records).unwrap())),
        }];
        let out = run_inference(&[it], &models, &InferenceOptions::default()).unwrap();
        let conds: Vec<Condition> = out.iter().map(|r| r.condition).collect();
        assert_eq!(conds, Condition::ALL);
    }

    #[test]
    fn too_many_failures_abort() {
        let models = [ModelSource {
            model_id: "m".into(),
            source: ResponseSource::Replay(Arc::new(ReplayStore::default())),
        }];
        let err = run_inference(&[item("q1", None)], &models, &InferenceOptions::default()).unwrap_err();
        assert!(matches!(err, InferenceError::TooManyFailures { failed: 3, total: 3, .. }));
    }

    /// Serves scripted (status, body) pairs in order and counts requests.
    fn stub(script: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>) {
        let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
        let port = server.server_addr().to_ip().unwrap().port();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        std::thread::spawn(move || {
            for (status, body) in script {
                let Ok(mut request) = server.recv() else { return };
                let mut sink = String::new();
                let _ = std::io::Read::read_to_string(request.as_reader(), &mut sink);
                counter.fetch_add(1, Ordering::SeqCst);
                let _ = request.respond(tiny_http::Response::from_string(body).with_status_code(status));
            }
        });
        (format!("http://127.0.0.1:{port}/v1"), hits)
    }

    fn ok_body(text: &str) -> String {
        serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
    }

    fn blank_prompt() -> PromptSpec {
        build_prompt(&item("q", None), Condition::Blank, &PromptTemplate::default(), DecodeParams::default())
            .unwrap()
    }

    fn fast(url: String) -> EndpointConfig {
        let mut cfg = EndpointConfig::new(url, "stub-model");
        cfg.backoff_ms = 1;
        cfg.timeout_s = 5.0;
        cfg
    }

    #[test]
    fn echo_endpoint_returns_text_verbatim() {
        let (url, hits) = stub(vec![(200, ok_body("<answer>yes</answer>"))]);
        let done = query_model(&fast(url), &blank_prompt()).unwrap();
        assert_eq!(done.text, "<answer>yes</answer>");
        assert_eq!(done.attempts, 1);
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn server_errors_are_retried() {
        let (url, hits) = stub(vec![
            (500, "busy".into()),
            (500, "busy".into()),
            (200, ok_body("fine")),
        ]);
        let mut cfg = fast(url);
        cfg.max_retries = 3;
        let done = query_model(&cfg, &blank_prompt()).unwrap();
        assert_eq!(done.text, "fine");
        assert_eq!(done.attempts, 3);
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn unauthorized_is_permanent() {
        let (url, hits) = stub(vec![(401, "bad token".into()), (200, ok_body("never"))]);
        let err = query_model(&fast(url), &blank_prompt()).unwrap_err();
        assert!(matches!(err, InferenceError::Permanent { status: 401, ref excerpt } if excerpt == "bad token"));
        std::thread::sleep(Duration::from_millis(50));
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn retries_are_bounded() {
        let (url, hits) = stub(vec![(503, "a".into()), (503, "b".into()), (503, "c".into())]);
        let mut cfg = fast(url);
        cfg.max_retries = 2;
        let err = query_model(&cfg, &blank_prompt()).unwrap_err();
        assert!(matches!(err, InferenceError::Transport { attempts: 3, .. }));
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn missing_token_is_reported() {
        let mut cfg = fast("http://127.0.0.1:9/v1".into());
        cfg.auth_token_env = Some("GROUNDCHECK_TEST_UNSET_TOKEN".into());
        let err = query_model(&cfg, &blank_prompt()).unwrap_err();
        assert!(matches!(err, InferenceError::MissingToken(_)));
    }
}
