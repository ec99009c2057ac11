//! Text-generation and embedding providers.
//!
//! [`RemoteClient`] speaks the OpenAI-compatible HTTP protocol
//! (`/chat/completions`, `/embeddings`) with bounded retries and an
//! in-flight limit. [`MockProvider`] is a deterministic offline stand-in: it
//! labels the query line of a prompt by lexicon vote and embeds text by
//! feature hashing.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::{Label, TaskKind};
use crate::digest::{sha256_hex, sha256_parts};
use crate::prompting::{self, INDUCTION_CLOSING};

pub const DEFAULT_ICL_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_INDUCTION_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_LABEL_MAX_TOKENS: u32 = 8;
pub const DEFAULT_INDUCTION_MAX_TOKENS: u32 = 128;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("credential environment variable {0} is not set")]
    MissingCredential(String),
    #[error("provider rejected the credential (HTTP {0})")]
    Unauthorized(u16),
    #[error("non-retryable HTTP status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("malformed response body: {0}")]
    MalformedResponse(String),
    #[error("provider returned {actual} vectors for {expected} inputs")]
    CountMismatch { expected: usize, actual: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid provider config: {0}")]
    InvalidConfig(String),
    #[error("prompt does not end in a known query line: {0:?}")]
    UnknownQuery(String),
    #[error("request log: {0}")]
    Log(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt_text: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl CompletionRequest {
    pub fn new(
        model: impl Into<String>,
        prompt_text: impl Into<String>,
        temperature: f64,
        max_tokens: u32,
    ) -> Result<Self, GatewayError> {
        let request = Self { model: model.into(), prompt_text: prompt_text.into(), temperature, max_tokens };
        request.validate()?;
        Ok(request)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt_text.is_empty() {
            return Err(GatewayError::InvalidRequest("empty prompt".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::InvalidRequest(format!("temperature {} must be >= 0", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(self.prompt_text.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub base_url: String,
    #[serde(default = "default_credential_env_var")]
    pub credential_env_var: String,
    #[serde(default = "default_timeout_ms")]
    pub request_timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_completion_model")]
    pub completion_model: String,
    #[serde(default = "default_embedding_model")]
    pub embedding_model: String,
    #[serde(default = "default_batch_size")]
    pub embedding_batch_size: usize,
    #[serde(default)]
    pub request_log: Option<PathBuf>,
}

fn default_credential_env_var() -> String {
    "OPENAI_API_KEY".into()
}
fn default_timeout_ms() -> u64 {
    60_000
}
fn default_max_retries() -> u32 {
    5
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_max_in_flight() -> usize {
    4
}
fn default_completion_model() -> String {
    "gpt-3.5-turbo".into()
}
fn default_embedding_model() -> String {
    "text-embedding-ada-002".into()
}
fn default_batch_size() -> usize {
    64
}

impl ProviderConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            credential_env_var: default_credential_env_var(),
            request_timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            backoff_base_ms: default_backoff_ms(),
            max_in_flight: default_max_in_flight(),
            completion_model: default_completion_model(),
            embedding_model: default_embedding_model(),
            embedding_batch_size: default_batch_size(),
            request_log: None,
        }
    }

    /// All problems, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            out.push(format!("provider.base_url {:?} is not an http(s) URL", self.base_url));
        }
        if self.credential_env_var.trim().is_empty() {
            out.push("provider.credential_env_var is empty".into());
        }
        if self.max_in_flight == 0 {
            out.push("provider.max_in_flight must be at least 1".into());
        }
        if self.request_timeout_ms == 0 {
            out.push("provider.request_timeout_ms must be positive".into());
        }
        if self.embedding_batch_size == 0 {
            out.push("provider.embedding_batch_size must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(GatewayError::InvalidConfig(problems.join("; ")))
        }
    }
}

/// A text generator.
pub trait CompletionProvider: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError>;

    /// Stable description recorded in run manifests.
    fn identity(&self) -> String;
}

/// A text embedder. Returned vectors are in input order.
pub trait EmbeddingProvider: Send + Sync {
    fn model_id(&self) -> &str;

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError>;

    fn batch_size(&self) -> usize {
        64
    }
}

/// Counting semaphore bounding outstanding requests.
#[derive(Debug)]
pub struct InFlightLimiter {
    max: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    limiter: &'a InFlightLimiter,
}

impl InFlightLimiter {
    pub fn new(max: usize) -> Self {
        assert!(max >= 1, "max_in_flight must be at least 1");
        Self { max, current: Mutex::new(0), freed: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut current = self.current.lock().expect("limiter lock");
        while *current >= self.max {
            current = self.freed.wait(current).expect("limiter lock");
        }
        *current += 1;
        Permit { limiter: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.current.lock().expect("limiter lock")
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut current = self.limiter.current.lock().expect("limiter lock");
        *current -= 1;
        self.limiter.freed.notify_one();
    }
}

#[derive(Debug, Serialize)]
struct LogLine<'a> {
    timestamp: u128,
    content_hash: &'a str,
    model: &'a str,
    status: Option<u16>,
    latency_ms: u128,
}

enum Attempt {
    Done(Value),
    Retry(String),
}

/// OpenAI-compatible HTTP client. Shareable across threads.
pub struct RemoteClient {
    config: ProviderConfig,
    http: reqwest::blocking::Client,
    api_key: String,
    limiter: InFlightLimiter,
    log: Option<Mutex<File>>,
}

impl std::fmt::Debug for RemoteClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteClient").field("base_url", &self.config.base_url).finish_non_exhaustive()
    }
}

impl RemoteClient {
    /// Build a client, reading the key from the configured environment variable.
    pub fn from_config(config: ProviderConfig) -> Result<Self, GatewayError> {
        let key = std::env::var(&config.credential_env_var)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| GatewayError::MissingCredential(config.credential_env_var.clone()))?;
        Self::with_key(config, key)
    }

    pub fn with_key(config: ProviderConfig, api_key: String) -> Result<Self, GatewayError> {
        config.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.request_timeout_ms))
            .build()
            .map_err(|e| GatewayError::InvalidConfig(e.to_string()))?;
        let log = match &config.request_log {
            Some(path) => {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| GatewayError::Log(e.to_string()))?;
                }
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| GatewayError::Log(format!("{}: {e}", path.display())))?;
                Some(Mutex::new(file))
            }
            None => None,
        };
        Ok(Self { limiter: InFlightLimiter::new(config.max_in_flight), config, http, api_key, log })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    fn url(&self, route: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), route)
    }

    fn log_attempt(&self, content_hash: &str, model: &str, status: Option<u16>, started: Instant) {
        let Some(log) = &self.log else { return };
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
        let line = LogLine { timestamp, content_hash, model, status, latency_ms: started.elapsed().as_millis() };
        let text = serde_json::to_string(&line).expect("log line serializes");
        if let Ok(mut file) = log.lock() {
            if let Err(e) = writeln!(file, "{text}") {
                log::warn!("request log write failed: {e}");
            }
        }
    }

    /// POST with retries on transport failures, 429 and 5xx.
    fn post_json(&self, route: &str, body: &Value, content_hash: &str, model: &str) -> Result<Value, GatewayError> {
        let max_attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 1..=max_attempts {
            if attempt > 1 {
                let factor = 1u64 << (attempt - 2).min(16);
                std::thread::sleep(Duration::from_millis(self.config.backoff_base_ms.saturating_mul(factor)));
            }
            match self.attempt(route, body, content_hash, model)? {
                Attempt::Done(value) => return Ok(value),
                Attempt::Retry(reason) => {
                    log::debug!("{route} attempt {attempt}/{max_attempts} failed: {reason}");
                    last = reason;
                }
            }
        }
        Err(GatewayError::RetriesExhausted { attempts: max_attempts, last })
    }

    fn attempt(&self, route: &str, body: &Value, content_hash: &str, model: &str) -> Result<Attempt, GatewayError> {
        let _permit = self.limiter.acquire();
        let started = Instant::now();
        let sent = self.http.post(self.url(route)).bearer_auth(&self.api_key).json(body).send();
        let response = match sent {
            Ok(r) => r,
            Err(e) => {
                self.log_attempt(content_hash, model, None, started);
                return Ok(Attempt::Retry(format!("transport: {}", describe_transport(&e))));
            }
        };
        let status = response.status().as_u16();
        let text = response.text();
        self.log_attempt(content_hash, model, Some(status), started);
        let text = match text {
            Ok(t) => t,
            Err(e) => return Ok(Attempt::Retry(format!("reading body: {}", describe_transport(&e)))),
        };
        match status {
            200..=299 => serde_json::from_str(&text)
                .map(Attempt::Done)
                .map_err(|e| GatewayError::MalformedResponse(e.to_string())),
            401 | 403 => Err(GatewayError::Unauthorized(status)),
            429 | 500..=599 => Ok(Attempt::Retry(format!("HTTP {status}"))),
            _ => Err(GatewayError::Http { status, body: truncate(&text, 200) }),
        }
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        request.validate()?;
        let body = json!({
            "model": request.model,
            "messages": [{"role": "user", "content": request.prompt_text}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let value = self.post_json("chat/completions", &body, &request.content_hash(), &request.model)?;
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| GatewayError::MalformedResponse("missing choices[0].message.content".into()))
    }

    /// Embed `texts`, batching transparently. Output order matches input order.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidRequest("no texts to embed".into()));
        }
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.config.embedding_batch_size.max(1)) {
            let model = &self.config.embedding_model;
            let body = json!({"model": model, "input": chunk});
            let joined: Vec<&[u8]> = chunk.iter().map(|t| t.as_bytes()).collect();
            let value = self.post_json("embeddings", &body, &sha256_parts(&joined), model)?;
            out.extend(parse_embeddings(&value, chunk.len())?);
        }
        Ok(out)
    }
}

fn describe_transport(e: &reqwest::Error) -> String {
    if e.is_timeout() {
        "timeout".into()
    } else if e.is_connect() {
        "connection failed".into()
    } else {
        // reqwest errors carry the URL, never headers
        e.to_string()
    }
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((idx, _)) => format!("{}...", &s[..idx]),
        None => s.to_string(),
    }
}

fn parse_embeddings(value: &Value, expected: usize) -> Result<Vec<Vec<f64>>, GatewayError> {
    let data = value
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| GatewayError::MalformedResponse("missing data array".into()))?;
    if data.len() != expected {
        return Err(GatewayError::CountMismatch { expected, actual: data.len() });
    }
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
    for (pos, item) in data.iter().enumerate() {
        let index = item.get("index").and_then(Value::as_u64).map(|i| i as usize).unwrap_or(pos);
        let vector = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| GatewayError::MalformedResponse(format!("data[{pos}] has no embedding")))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| GatewayError::MalformedResponse("non-numeric component".into())))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push((index, vector));
    }
    rows.sort_by_key(|(i, _)| *i);
    if rows.iter().enumerate().any(|(pos, (i, _))| pos != *i) {
        return Err(GatewayError::MalformedResponse("embedding indices are not 0..n".into()));
    }
    Ok(rows.into_iter().map(|(_, v)| v).collect())
}

/// One-shot completion against a remote provider.
pub fn complete(request: &CompletionRequest, config: &ProviderConfig) -> Result<String, GatewayError> {
    RemoteClient::from_config(config.clone())?.complete(request)
}

impl CompletionProvider for RemoteClient {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        RemoteClient::complete(self, request)
    }

    fn identity(&self) -> String {
        format!(
            "remote:{}:{}:{}",
            self.config.base_url, self.config.completion_model, self.config.embedding_model
        )
    }
}

impl EmbeddingProvider for RemoteClient {
    fn model_id(&self) -> &str {
        &self.config.embedding_model
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        RemoteClient::embed(self, texts)
    }

    fn batch_size(&self) -> usize {
        self.config.embedding_batch_size
    }
}

/// Lexicon-vote labelling rule for the mock provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub task_kind: TaskKind,
    pub lexicon: BTreeMap<String, Label>,
    pub default_label: Label,
}

impl MockRule {
    pub fn new(task_kind: TaskKind, lexicon: BTreeMap<String, Label>, default_label: Label) -> Result<Self, GatewayError> {
        let rule = Self { task_kind, lexicon, default_label };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.lexicon.is_empty() {
            return Err(GatewayError::InvalidConfig("mock lexicon is empty".into()));
        }
        if self.default_label.task_kind() != self.task_kind {
            return Err(GatewayError::InvalidConfig(format!(
                "default label {} is not a {} label",
                self.default_label, self.task_kind
            )));
        }
        if let Some((word, label)) = self.lexicon.iter().find(|(_, l)| l.task_kind() != self.task_kind) {
            return Err(GatewayError::InvalidConfig(format!("lexicon entry {word:?} -> {label} is not a {} label", self.task_kind)));
        }
        Ok(())
    }

    /// A small built-in lexicon per task.
    pub fn builtin(task_kind: TaskKind) -> Self {
        let (entries, default_label): (&[(&str, Label)], Label) = match task_kind {
            TaskKind::Sentiment => (
                &[
                    ("great", Label::Positive),
                    ("good", Label::Positive),
                    ("excellent", Label::Positive),
                    ("wonderful", Label::Positive),
                    ("loved", Label::Positive),
                    ("best", Label::Positive),
                    ("enjoyable", Label::Positive),
                    ("bad", Label::Negative),
                    ("awful", Label::Negative),
                    ("boring", Label::Negative),
                    ("dull", Label::Negative),
                    ("terrible", Label::Negative),
                    ("worst", Label::Negative),
                    ("hated", Label::Negative),
                ],
                Label::Negative,
            ),
            TaskKind::Nli => (
                &[
                    ("not", Label::Contradiction),
                    ("no", Label::Contradiction),
                    ("never", Label::Contradiction),
                    ("nobody", Label::Contradiction),
                    ("might", Label::Neutral),
                    ("probably", Label::Neutral),
                    ("because", Label::Neutral),
                ],
                Label::Entailment,
            ),
        };
        let lexicon = entries.iter().map(|(w, l)| (w.to_string(), *l)).collect();
        Self { task_kind, lexicon, default_label }
    }

    /// Majority vote over lexicon hits; ties and no hits fall back to the default.
    pub fn label_text(&self, text: &str) -> Label {
        let mut votes: BTreeMap<Label, usize> = BTreeMap::new();
        for token in mock_tokens(text) {
            if let Some(label) = self.lexicon.get(&token) {
                *votes.entry(*label).or_default() += 1;
            }
        }
        let best = votes.values().copied().max().unwrap_or(0);
        let winners: Vec<Label> = votes.iter().filter(|(_, &n)| n == best).map(|(l, _)| *l).collect();
        match winners.as_slice() {
            [only] if best > 0 => *only,
            _ => self.default_label,
        }
    }
}

/// Lowercased whitespace tokens with surrounding punctuation removed.
pub fn mock_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().filter_map(|raw| {
        let trimmed = raw.trim_matches(|c: char| !c.is_alphanumeric());
        (!trimmed.is_empty()).then(|| trimmed.to_lowercase())
    })
}

/// Label the query line of an ICL prompt with `rule`.
pub fn mock_complete(request: &CompletionRequest, rule: &MockRule) -> Result<String, GatewayError> {
    let last = request.prompt_text.rsplit('\n').next().unwrap_or_default();
    let query = prompting::parse_query_line(last).ok_or_else(|| GatewayError::UnknownQuery(last.to_string()))?;
    if query.task_kind() != rule.task_kind {
        return Err(GatewayError::UnknownQuery(last.to_string()));
    }
    Ok(rule.label_text(&query.joined()).as_str().to_string())
}

const SENTIMENT_INSTRUCTIONS: &[&str] = &[
    " For each input, say whether the review is positive or negative.",
    " Label each movie review as positive or negative.",
    " Summarize how the writer felt about the film.",
    " Give each input a one-word verdict.",
    " Rate the acting described in each review.",
];

const NLI_INSTRUCTIONS: &[&str] = &[
    " Decide whether the hypothesis follows from, is unrelated to, or contradicts the premise.",
    " Determine the relation between the premise and the hypothesis.",
    " Say whether the two sentences agree.",
    " Provide an output for each of the given inputs.",
];

/// Deterministic stand-in for an induced instruction: picks a canned
/// instruction by hashing the prompt.
pub fn mock_instruction(request: &CompletionRequest) -> Result<String, GatewayError> {
    let last = request.prompt_text.rsplit('\n').next().unwrap_or_default();
    if last != INDUCTION_CLOSING {
        return Err(GatewayError::UnknownQuery(last.to_string()));
    }
    let pool = if request.prompt_text.contains("The input is premise: ") { NLI_INSTRUCTIONS } else { SENTIMENT_INSTRUCTIONS };
    let digest = sha256_hex(request.prompt_text.as_bytes());
    let pick = u64::from_str_radix(&digest[..8], 16).expect("hex digest") as usize % pool.len();
    Ok(pool[pick].to_string())
}

/// Bag-of-words feature hashing into `dimension` non-negative buckets.
#[derive(Debug)]
pub struct HashEmbedder {
    dimension: usize,
    model_id: String,
    calls: AtomicUsize,
    texts: AtomicUsize,
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "dimension must be positive");
        Self {
            dimension,
            model_id: format!("mock-hash-{dimension}"),
            calls: AtomicUsize::new(0),
            texts: AtomicUsize::new(0),
        }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.dimension];
        let mut tokens: Vec<String> = mock_tokens(text).collect();
        if tokens.is_empty() {
            tokens = text.split_whitespace().map(str::to_lowercase).collect();
        }
        if tokens.is_empty() {
            tokens.push(text.to_string());
        }
        for token in tokens {
            let digest = sha256_hex(token.as_bytes());
            let bucket = u64::from_str_radix(&digest[..12], 16).expect("hex digest") as usize % self.dimension;
            out[bucket] += 1.0;
        }
        out
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn texts_embedded(&self) -> usize {
        self.texts.load(Ordering::SeqCst)
    }

    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::SeqCst);
        self.texts.store(0, Ordering::SeqCst);
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidRequest("no texts to embed".into()));
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.texts.fetch_add(texts.len(), Ordering::SeqCst);
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Offline provider: lexicon-vote completions, canned instructions, hashed embeddings.
#[derive(Debug)]
pub struct MockProvider {
    rule: MockRule,
    embedder: HashEmbedder,
    completions: AtomicUsize,
}

impl MockProvider {
    pub const DEFAULT_DIMENSION: usize = 64;

    pub fn new(rule: MockRule) -> Self {
        Self::with_dimension(rule, Self::DEFAULT_DIMENSION)
    }

    pub fn with_dimension(rule: MockRule, dimension: usize) -> Self {
        Self { rule, embedder: HashEmbedder::new(dimension), completions: AtomicUsize::new(0) }
    }

    pub fn rule(&self) -> &MockRule {
        &self.rule
    }

    pub fn embedder(&self) -> &HashEmbedder {
        &self.embedder
    }

    pub fn completions(&self) -> usize {
        self.completions.load(Ordering::SeqCst)
    }
}

impl CompletionProvider for MockProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        request.validate()?;
        self.completions.fetch_add(1, Ordering::SeqCst);
        if request.prompt_text.ends_with(INDUCTION_CLOSING) {
            mock_instruction(request)
        } else {
            mock_complete(request, &self.rule)
        }
    }

    fn identity(&self) -> String {
        let rule = serde_json::to_string(&self.rule).expect("rule serializes");
        format!("mock:{}:{}", self.embedder.model_id, &sha256_hex(rule.as_bytes())[..16])
    }
}

impl EmbeddingProvider for MockProvider {
    fn model_id(&self) -> &str {
        self.embedder.model_id()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        self.embedder.embed(texts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sentiment_rule() -> MockRule {
        let lexicon = [("great", Label::Positive), ("dull", Label::Negative)]
            .into_iter()
            .map(|(w, l)| (w.to_string(), l))
            .collect();
        MockRule::new(TaskKind::Sentiment, lexicon, Label::Negative).unwrap()
    }

    fn request(prompt: &str) -> CompletionRequest {
        CompletionRequest::new("m", prompt, 0.0, 8).unwrap()
    }

    #[test]
    fn majority_vote() {
        // great x2 vs dull x1
        let out = mock_complete(&request("The sentence is a great great dull film, the sentiment is"), &sentiment_rule()).unwrap();
        assert_eq!(out, "positive");
    }

    #[test]
    fn no_votes_falls_back_to_default() {
        let out = mock_complete(&request("The sentence is an ordinary film, the sentiment is"), &sentiment_rule()).unwrap();
        assert_eq!(out, "negative");
    }

    #[test]
    fn tie_falls_back_to_default() {
        let mut rule = sentiment_rule();
        rule.default_label = Label::Positive;
        let out = mock_complete(&request("The sentence is great but dull, the sentiment is"), &rule).unwrap();
        assert_eq!(out, "positive");
    }

    #[test]
    fn only_the_last_line_counts() {
        let prompt = "The sentence is dull dull dull, the sentiment is negative.\nThe sentence is great, the sentiment is";
        let a = mock_complete(&request(prompt), &sentiment_rule()).unwrap();
        let b = mock_complete(&request(prompt), &sentiment_rule()).unwrap();
        assert_eq!(a, "positive");
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_query_is_an_error() {
        let err = mock_complete(&request("hello there"), &sentiment_rule()).unwrap_err();
        assert!(matches!(err, GatewayError::UnknownQuery(_)));
    }

    #[test]
    fn nli_query_votes_over_both_sides() {
        let rule = MockRule::builtin(TaskKind::Nli);
        let out = mock_complete(
            &request("The premise is A dog runs., the hypothesis is The dog is not moving., the relation is"),
            &rule,
        )
        .unwrap();
        assert_eq!(out, "contradiction");
    }

    #[test]
    fn rule_validation() {
        assert!(MockRule::new(TaskKind::Sentiment, BTreeMap::new(), Label::Negative).is_err());
        let lexicon = [("x".to_string(), Label::Neutral)].into_iter().collect();
        assert!(MockRule::new(TaskKind::Sentiment, lexicon, Label::Negative).is_err());
    }

    #[test]
    fn request_validation() {
        assert!(CompletionRequest::new("m", "", 0.0, 8).is_err());
        assert!(CompletionRequest::new("m", "x", -0.1, 8).is_err());
        assert!(CompletionRequest::new("m", "x", 0.0, 0).is_err());
    }

    #[test]
    fn missing_credential() {
        let mut config = ProviderConfig::new("http://127.0.0.1:9");
        config.credential_env_var = "CDICL_TEST_SURELY_UNSET_VAR".into();
        let err = RemoteClient::from_config(config).unwrap_err();
        assert!(matches!(err, GatewayError::MissingCredential(_)));
    }

    #[test]
    fn config_problems_are_collected() {
        let mut config = ProviderConfig::new("ftp://x");
        config.max_in_flight = 0;
        assert_eq!(config.problems().len(), 2);
    }

    #[test]
    fn hash_embedder_is_deterministic_and_nonzero() {
        let e = HashEmbedder::new(16);
        let a = e.embed_one("A great film!");
        assert_eq!(a, e.embed_one("A great film!"));
        assert!(a.iter().any(|x| *x > 0.0));
        assert!(e.embed_one("!!!").iter().any(|x| *x > 0.0));
        assert!(e.embed(&[]).is_err());
    }

    #[test]
    fn embeddings_parse_by_index() {
        let body = json!({"data": [
            {"index": 1, "embedding": [0.0, 1.0]},
            {"index": 0, "embedding": [1.0, 0.0]},
        ]});
        let out = parse_embeddings(&body, 2).unwrap();
        assert_eq!(out, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(parse_embeddings(&body, 3), Err(GatewayError::CountMismatch { expected: 3, actual: 2 })));
    }

    #[test]
    fn limiter_counts() {
        let limiter = InFlightLimiter::new(2);
        let a = limiter.acquire();
        let _b = limiter.acquire();
        assert_eq!(limiter.in_flight(), 2);
        drop(a);
        assert_eq!(limiter.in_flight(), 1);
    }

    #[test]
    fn mock_instruction_is_deterministic() {
        let prompt = "I gave a friend an instruction and some inputs. The friend read the instruction and wrote an output for every input. Here are the input-output pairs:\nThe input is fine, the output is positive.\nThe instruction was";
        let provider = MockProvider::new(MockRule::builtin(TaskKind::Sentiment));
        let a = provider.complete(&CompletionRequest::new("m", prompt, 1.0, 128).unwrap()).unwrap();
        let b = provider.complete(&CompletionRequest::new("m", prompt, 1.0, 128).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(SENTIMENT_INSTRUCTIONS.contains(&a.as_str()));
    }
}
