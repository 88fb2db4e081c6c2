//! Client for text generation, reranking, and embedding services.
//!
//! [`Gateway`] wraps a [`Backend`] with retries, a global in-flight limit, an
//! optional per-endpoint rate limit, and a structured call log. Two backends
//! ship here: [`HttpBackend`] speaks the chat-completions request shape plus
//! JSON rerank and embedding endpoints, and [`MockBackend`] replays a script
//! keyed by prompt hash or substring.

use std::collections::HashMap;
use std::fmt;
use std::net::IpAddr;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const API_KEY_ENV: &str = "CARDFORGE_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServiceFault {
    Status(u16),
    UnscriptedPrompt(String),
    EmptyRefinement,
    MalformedResponse(String),
    Transport(String),
}

impl fmt::Display for ServiceFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ServiceFault::Status(code) => write!(f, "HTTP status {code}"),
            ServiceFault::UnscriptedPrompt(hash) => write!(f, "unscripted prompt {hash}"),
            ServiceFault::EmptyRefinement => write!(f, "empty refinement response"),
            ServiceFault::MalformedResponse(m) => write!(f, "malformed response: {m}"),
            ServiceFault::Transport(m) => write!(f, "transport error: {m}"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("rate limited")]
    RateLimited,
    #[error("service error: {0}")]
    Service(ServiceFault),
    #[error("request timed out")]
    Timeout,
    #[error("empty input")]
    EmptyInput,
    #[error("invalid gateway configuration: {0}")]
    Config(String),
}

impl GatewayError {
    /// Errors worth another attempt.
    pub fn is_transient(&self) -> bool {
        match self {
            GatewayError::RateLimited | GatewayError::Timeout => true,
            GatewayError::Service(ServiceFault::Status(code)) => *code >= 500,
            GatewayError::Service(ServiceFault::Transport(_)) => true,
            _ => false,
        }
    }

    /// Errors that abort a whole pipeline run rather than one field.
    pub fn is_fatal(&self) -> bool {
        matches!(self, GatewayError::Auth(_) | GatewayError::Config(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Prompt {
    pub messages: Vec<Message>,
}

impl Prompt {
    pub fn new(messages: Vec<Message>) -> Self {
        Prompt { messages }
    }

    /// Canonical text form; the mock matches against this and the call log
    /// hashes it.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            out.push_str("<|");
            out.push_str(role);
            out.push_str("|>\n");
            out.push_str(&m.content);
            out.push('\n');
        }
        out
    }

    fn is_blank(&self) -> bool {
        self.messages.iter().all(|m| m.content.trim().is_empty())
    }
}

fn render_rerank(query: &str, candidates: &[String]) -> String {
    let mut out = format!("<|rerank|>\nquery: {query}\n");
    for (i, c) in candidates.iter().enumerate() {
        out.push_str(&format!("[{i}] {c}\n"));
    }
    out
}

fn render_embed(text: &str) -> String {
    format!("<|embed|>\n{text}\n")
}

/// SHA-256 of the rendered request, hex encoded.
pub fn prompt_hash(rendered: &str) -> String {
    hex::encode(Sha256::digest(rendered.as_bytes()).as_slice())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_output_tokens: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            temperature: 0.2,
            top_p: 0.9,
            max_output_tokens: 8192,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::Config(format!("temperature {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GatewayError::Config(format!("top_p {}", self.top_p)));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::Config("max_output_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Gateway configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub base_url: String,
    pub model: String,
    pub rerank_url: String,
    pub rerank_model: Option<String>,
    pub embed_url: String,
    pub embed_model: Option<String>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_output_tokens: u32,
    pub max_concurrency: usize,
    pub timeout_secs: u64,
    /// Minimum spacing between requests to one endpoint; unset means no limit.
    pub requests_per_second: Option<f64>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        let g = GenerationConfig::default();
        GatewayConfig {
            base_url: String::new(),
            model: String::new(),
            rerank_url: String::new(),
            rerank_model: None,
            embed_url: String::new(),
            embed_model: None,
            temperature: g.temperature,
            top_p: g.top_p,
            max_output_tokens: g.max_output_tokens,
            max_concurrency: 4,
            timeout_secs: 120,
            requests_per_second: None,
        }
    }
}

impl GatewayConfig {
    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            temperature: self.temperature,
            top_p: self.top_p,
            max_output_tokens: self.max_output_tokens,
        }
    }
}

/// Raw service access. Implementations do no retrying or logging.
pub trait Backend: Send + Sync {
    fn generate(&self, prompt: &Prompt, config: &GenerationConfig) -> Result<String, GatewayError>;

    /// One relevance score per candidate, in candidate order.
    fn rerank(&self, query: &str, candidates: &[String]) -> Result<Vec<f64>, GatewayError>;

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError>;

    /// Whether identical inputs always give identical outputs. Deterministic
    /// backends run pipeline stages sequentially so call order, and therefore
    /// scripted responses, are reproducible.
    fn is_deterministic(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankResult {
    /// (candidate index, score), descending by score; ties by ascending index.
    pub scores: Vec<(usize, f64)>,
}

impl RerankResult {
    pub fn order(&self) -> Vec<usize> {
        self.scores.iter().map(|(i, _)| *i).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    Generate,
    Rerank,
    Embed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub seq: usize,
    pub endpoint: Endpoint,
    pub prompt_hash: String,
    pub attempt: u32,
    /// Wall-clock latency; not recorded for deterministic backends.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
    pub outcome: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

struct Semaphore {
    available: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore {
            available: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.cv.wait(n).unwrap();
        }
        *n -= 1;
        SemaphoreGuard { sem: self }
    }
}

struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.sem.available.lock().unwrap() += 1;
        self.sem.cv.notify_one();
    }
}

struct RateLimiter {
    interval: Duration,
    next: Mutex<HashMap<u8, Instant>>,
}

impl RateLimiter {
    fn wait(&self, endpoint: Endpoint) {
        let slot = {
            let mut next = self.next.lock().unwrap();
            let now = Instant::now();
            let entry = next.entry(endpoint as u8).or_insert(now);
            let slot = (*entry).max(now);
            *entry = slot + self.interval;
            slot
        };
        let now = Instant::now();
        if slot > now {
            std::thread::sleep(slot - now);
        }
    }
}

/// Shared entry point for all model calls.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    generation: GenerationConfig,
    retry: RetryPolicy,
    max_concurrency: usize,
    permits: Semaphore,
    rate: Option<RateLimiter>,
    log: Mutex<Vec<CallRecord>>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, generation: GenerationConfig, max_concurrency: usize) -> Self {
        Gateway {
            backend,
            generation,
            retry: RetryPolicy::default(),
            max_concurrency: max_concurrency.max(1),
            permits: Semaphore::new(max_concurrency),
            rate: None,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Live HTTP gateway from a config file and an optional API key.
    pub fn from_config(config: &GatewayConfig, api_key: Option<String>) -> Result<Self, GatewayError> {
        let generation = config.generation();
        generation.validate()?;
        let backend = HttpBackend::new(config.clone(), api_key)?;
        let mut gw = Gateway::new(Arc::new(backend), generation, config.max_concurrency);
        if let Some(rps) = config.requests_per_second {
            if !(rps > 0.0 && rps.is_finite()) {
                return Err(GatewayError::Config(format!("requests_per_second {rps}")));
            }
            gw.rate = Some(RateLimiter {
                interval: Duration::from_secs_f64(1.0 / rps),
                next: Mutex::new(HashMap::new()),
            });
        }
        Ok(gw)
    }

    /// Gateway over a scripted mock, with no retry delay.
    pub fn mock(mock: Arc<MockBackend>) -> Self {
        Gateway::new(mock, GenerationConfig::default(), 1).with_retry(RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::ZERO,
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn generation_config(&self) -> &GenerationConfig {
        &self.generation
    }

    /// Worker count callers should use when fanning out independent calls.
    pub fn parallelism(&self) -> usize {
        if self.backend.is_deterministic() {
            1
        } else {
            self.max_concurrency
        }
    }

    pub fn call_log(&self) -> Vec<CallRecord> {
        self.log.lock().unwrap().clone()
    }

    pub fn call_log_jsonl(&self) -> String {
        self.call_log()
            .iter()
            .map(|r| serde_json::to_string(r).expect("call record serializes") + "\n")
            .collect()
    }

    pub fn calls_to(&self, endpoint: Endpoint) -> usize {
        self.log
            .lock()
            .unwrap()
            .iter()
            .filter(|r| r.endpoint == endpoint)
            .count()
    }

    fn call<T>(
        &self,
        endpoint: Endpoint,
        rendered: &str,
        mut op: impl FnMut() -> Result<T, GatewayError>,
    ) -> Result<T, GatewayError> {
        let hash = prompt_hash(rendered);
        let timed = !self.backend.is_deterministic();
        let mut attempt = 0;
        loop {
            attempt += 1;
            if let Some(rate) = &self.rate {
                rate.wait(endpoint);
            }
            let started = Instant::now();
            let result = {
                let _permit = self.permits.acquire();
                op()
            };
            let latency_ms = timed.then(|| started.elapsed().as_millis() as u64);
            {
                let mut log = self.log.lock().unwrap();
                let seq = log.len();
                log.push(CallRecord {
                    seq,
                    endpoint,
                    prompt_hash: hash.clone(),
                    attempt,
                    latency_ms,
                    outcome: match &result {
                        Ok(_) => "ok".to_string(),
                        Err(e) => format!("error: {e}"),
                    },
                });
            }
            match result {
                Err(e) if e.is_transient() && attempt < self.retry.max_attempts => {
                    let delay = self.retry.base_delay * 2u32.pow(attempt - 1);
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                }
                other => return other,
            }
        }
    }

    pub fn generate(&self, prompt: &Prompt) -> Result<String, GatewayError> {
        self.generate_with(prompt, &self.generation.clone())
    }

    pub fn generate_with(&self, prompt: &Prompt, config: &GenerationConfig) -> Result<String, GatewayError> {
        if prompt.is_blank() {
            return Err(GatewayError::EmptyInput);
        }
        config.validate()?;
        self.call(Endpoint::Generate, &prompt.render(), || {
            self.backend.generate(prompt, config)
        })
    }

    pub fn rerank(&self, query: &str, candidates: &[String]) -> Result<RerankResult, GatewayError> {
        if candidates.is_empty() {
            return Err(GatewayError::EmptyInput);
        }
        let scores = self.call(Endpoint::Rerank, &render_rerank(query, candidates), || {
            self.backend.rerank(query, candidates)
        })?;
        if scores.len() != candidates.len() {
            return Err(GatewayError::Service(ServiceFault::MalformedResponse(format!(
                "{} scores for {} candidates",
                scores.len(),
                candidates.len()
            ))));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(GatewayError::Service(ServiceFault::MalformedResponse(
                "non-finite rerank score".into(),
            )));
        }
        let mut ranked: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(RerankResult { scores: ranked })
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyInput);
        }
        self.call(Endpoint::Embed, &render_embed(text), || self.backend.embed(text))
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, GatewayError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(GatewayError::Service(ServiceFault::MalformedResponse(format!(
            "embedding dimensions {} and {}",
            a.len(),
            b.len()
        ))));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

// ---------------------------------------------------------------------------
// HTTP backend

pub struct HttpBackend {
    config: GatewayConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

fn is_loopback(url: &str) -> bool {
    let rest = url.split("://").nth(1).unwrap_or(url);
    let authority = rest.split('/').next().unwrap_or("");
    let host = if authority.starts_with('[') {
        authority.trim_start_matches('[').split(']').next().unwrap_or("")
    } else {
        authority.split(':').next().unwrap_or("")
    };
    host.eq_ignore_ascii_case("localhost")
        || host.parse::<IpAddr>().map(|ip| ip.is_loopback()).unwrap_or(false)
}

pub(crate) fn build_agent(base_url: &str, timeout: Duration) -> ureq::Agent {
    let mut builder = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false);
    if is_loopback(base_url) {
        builder = builder.proxy(None);
    }
    builder.build().into()
}

impl HttpBackend {
    pub fn new(config: GatewayConfig, api_key: Option<String>) -> Result<Self, GatewayError> {
        if config.base_url.trim().is_empty() {
            return Err(GatewayError::Config("base_url is required".into()));
        }
        let agent = build_agent(&config.base_url, Duration::from_secs(config.timeout_secs.max(1)));
        Ok(HttpBackend {
            config,
            api_key: api_key.filter(|k| !k.trim().is_empty()),
            agent,
        })
    }

    fn post(&self, url: &str, body: Value) -> Result<Value, GatewayError> {
        if url.trim().is_empty() {
            return Err(GatewayError::Config("endpoint URL not configured".into()));
        }
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(map_transport_error)?;
        let status = resp.status().as_u16();
        match status {
            200..=299 => {}
            401 | 403 => return Err(GatewayError::Auth(format!("HTTP {status}"))),
            429 => return Err(GatewayError::RateLimited),
            408 => return Err(GatewayError::Timeout),
            _ => return Err(GatewayError::Service(ServiceFault::Status(status))),
        }
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| GatewayError::Service(ServiceFault::MalformedResponse(e.to_string())))
    }
}

fn map_transport_error(err: ureq::Error) -> GatewayError {
    match err {
        ureq::Error::Timeout(_) => GatewayError::Timeout,
        ureq::Error::StatusCode(code) => GatewayError::Service(ServiceFault::Status(code)),
        other => GatewayError::Service(ServiceFault::Transport(other.to_string())),
    }
}

fn malformed(what: &str) -> GatewayError {
    GatewayError::Service(ServiceFault::MalformedResponse(what.to_string()))
}

fn floats(v: &Value) -> Option<Vec<f64>> {
    v.as_array()?.iter().map(Value::as_f64).collect()
}

impl Backend for HttpBackend {
    fn generate(&self, prompt: &Prompt, config: &GenerationConfig) -> Result<String, GatewayError> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = json!({
            "model": self.config.model,
            "messages": prompt.messages,
            "temperature": config.temperature,
            "top_p": config.top_p,
            "max_tokens": config.max_output_tokens,
        });
        let resp = self.post(&url, body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| malformed("missing choices[0].message.content"))
    }

    fn rerank(&self, query: &str, candidates: &[String]) -> Result<Vec<f64>, GatewayError> {
        let mut body = json!({"query": query, "documents": candidates});
        if let Some(model) = &self.config.rerank_model {
            body["model"] = json!(model);
        }
        let resp = self.post(&self.config.rerank_url, body)?;
        if let Some(scores) = resp.get("scores").and_then(floats) {
            return Ok(scores);
        }
        let results = resp
            .get("results")
            .or_else(|| resp.get("data"))
            .and_then(Value::as_array)
            .ok_or_else(|| malformed("missing results"))?;
        let mut scores = vec![f64::NAN; candidates.len()];
        for r in results {
            let index = r.get("index").and_then(Value::as_u64).ok_or_else(|| malformed("result without index"))?
                as usize;
            let score = r
                .get("relevance_score")
                .or_else(|| r.get("score"))
                .and_then(Value::as_f64)
                .ok_or_else(|| malformed("result without score"))?;
            *scores.get_mut(index).ok_or_else(|| malformed("result index out of range"))? = score;
        }
        Ok(scores)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        let mut body = json!({"input": text});
        if let Some(model) = &self.config.embed_model {
            body["model"] = json!(model);
        }
        let resp = self.post(&self.config.embed_url, body)?;
        resp.pointer("/data/0/embedding")
            .or_else(|| resp.get("embedding"))
            .and_then(floats)
            .ok_or_else(|| malformed("missing embedding"))
    }
}

// ---------------------------------------------------------------------------
// Scripted mock

/// One line of a mock script file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    /// A 64-hex-digit prompt hash, or a substring of the rendered prompt.
    #[serde(rename = "match")]
    pub pattern: String,
    /// Text for generation; a JSON array of numbers for rerank and embed.
    pub response: Value,
}

impl ScriptEntry {
    pub fn new(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        ScriptEntry {
            pattern: pattern.into(),
            response: Value::String(response.into()),
        }
    }

    fn response_text(&self) -> String {
        match &self.response {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    }

    fn is_hash(&self) -> bool {
        self.pattern.len() == 64 && self.pattern.bytes().all(|b| b.is_ascii_hexdigit())
    }
}

#[derive(Default)]
struct MockState {
    cursors: HashMap<String, usize>,
    captured: Vec<String>,
}

/// Replays scripted responses.
///
/// Entries with the same `match` form a group answered in file order; a
/// group's cursor advances on every use and its last response repeats once
/// the group is exhausted. A prompt-hash match wins over substring matches,
/// and among substrings the longest wins (file order breaks ties). A prompt
/// that matches nothing is a hard error.
pub struct MockBackend {
    groups: Vec<(String, bool, Vec<String>)>,
    state: Mutex<MockState>,
}

impl MockBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        let mut groups: Vec<(String, bool, Vec<String>)> = Vec::new();
        for e in entries {
            let text = e.response_text();
            match groups.iter_mut().find(|(p, _, _)| *p == e.pattern) {
                Some(group) => group.2.push(text),
                None => groups.push((e.pattern.clone(), e.is_hash(), vec![text])),
            }
        }
        MockBackend {
            groups,
            state: Mutex::new(MockState::default()),
        }
    }

    pub fn from_jsonl(text: &str) -> Result<Self, GatewayError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(line)
                .map_err(|e| GatewayError::Config(format!("mock script line {}: {e}", i + 1)))?;
            entries.push(entry);
        }
        Ok(MockBackend::new(entries))
    }

    /// Every rendered request seen so far, in call order.
    pub fn captured(&self) -> Vec<String> {
        self.state.lock().unwrap().captured.clone()
    }

    fn respond(&self, rendered: String) -> Result<String, GatewayError> {
        let hash = prompt_hash(&rendered);
        let group = self
            .groups
            .iter()
            .find(|(p, is_hash, _)| *is_hash && p.eq_ignore_ascii_case(&hash))
            .or_else(|| {
                self.groups
                    .iter()
                    .filter(|(p, is_hash, _)| !*is_hash && !p.is_empty() && rendered.contains(p.as_str()))
                    .fold(None, |best: Option<&(String, bool, Vec<String>)>, g| match best {
                        Some(b) if b.0.len() >= g.0.len() => Some(b),
                        _ => Some(g),
                    })
            });
        let mut state = self.state.lock().unwrap();
        state.captured.push(rendered);
        let (pattern, _, responses) =
            group.ok_or(GatewayError::Service(ServiceFault::UnscriptedPrompt(hash)))?;
        let cursor = state.cursors.entry(pattern.clone()).or_insert(0);
        let response = responses[(*cursor).min(responses.len() - 1)].clone();
        *cursor += 1;
        Ok(response)
    }

    fn respond_numbers(&self, rendered: String) -> Result<Vec<f64>, GatewayError> {
        let text = self.respond(rendered)?;
        serde_json::from_str::<Vec<f64>>(&text)
            .map_err(|e| malformed(&format!("scripted numbers `{text}`: {e}")))
    }
}

impl Backend for MockBackend {
    fn generate(&self, prompt: &Prompt, _config: &GenerationConfig) -> Result<String, GatewayError> {
        self.respond(prompt.render())
    }

    fn rerank(&self, query: &str, candidates: &[String]) -> Result<Vec<f64>, GatewayError> {
        self.respond_numbers(render_rerank(query, candidates))
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        self.respond_numbers(render_embed(text))
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn user(text: &str) -> Prompt {
        Prompt::new(vec![Message::user(text)])
    }

    fn mock_gateway(entries: Vec<ScriptEntry>) -> (Arc<MockBackend>, Gateway) {
        let mock = Arc::new(MockBackend::new(entries));
        (mock.clone(), Gateway::mock(mock))
    }

    #[test]
    fn generation_defaults() {
        let g = GenerationConfig::default();
        assert_eq!((g.temperature, g.top_p, g.max_output_tokens), (0.2, 0.9, 8192));
        let c = GatewayConfig::default();
        assert_eq!(c.max_concurrency, 4);
        assert_eq!(c.generation(), g);
    }

    #[test]
    fn mock_matches_prompt_hash() {
        let prompt = user("are we done?");
        let hash = prompt_hash(&prompt.render());
        let (_, gw) = mock_gateway(vec![ScriptEntry::new(hash, "COMPLETE")]);
        assert_eq!(gw.generate(&prompt).unwrap(), "COMPLETE");
    }

    #[test]
    fn mock_unscripted_is_an_error() {
        let (_, gw) = mock_gateway(vec![]);
        let err = gw.generate(&user("hello")).unwrap_err();
        assert!(matches!(err, GatewayError::Service(ServiceFault::UnscriptedPrompt(_))));
        assert_eq!(gw.calls_to(Endpoint::Generate), 1);
    }

    #[test]
    fn mock_group_cursor_and_longest_match() {
        let (_, gw) = mock_gateway(vec![
            ScriptEntry::new("score", "1"),
            ScriptEntry::new("score", "2"),
            ScriptEntry::new("score this", "specific"),
        ]);
        assert_eq!(gw.generate(&user("please score")).unwrap(), "1");
        assert_eq!(gw.generate(&user("please score again")).unwrap(), "2");
        assert_eq!(gw.generate(&user("score")).unwrap(), "2");
        assert_eq!(gw.generate(&user("score this one")).unwrap(), "specific");
    }

    #[test]
    fn rerank_orders_by_score() {
        let (_, gw) = mock_gateway(vec![ScriptEntry::new("<|rerank|>", "[0.2, 0.9, 0.5]")]);
        let r = gw.rerank("q", &["a".into(), "b".into(), "c".into()]).unwrap();
        assert_eq!(r.order(), vec![1, 2, 0]);
    }

    #[test]
    fn rerank_single_candidate_and_ties() {
        let (_, gw) = mock_gateway(vec![
            ScriptEntry::new("[0] only", "[3.5]"),
            ScriptEntry::new("[1] same", "[0.5, 0.5, 0.7]"),
        ]);
        assert_eq!(gw.rerank("q", &["only".into()]).unwrap().order(), vec![0]);
        let r = gw
            .rerank("q", &["same".into(), "same".into(), "other".into()])
            .unwrap();
        assert_eq!(r.order(), vec![2, 0, 1]);
    }

    #[test]
    fn rerank_rejects_wrong_length_and_empty() {
        let (_, gw) = mock_gateway(vec![ScriptEntry::new("<|rerank|>", "[0.2]")]);
        assert!(gw.rerank("q", &["a".into(), "b".into()]).is_err());
        assert_eq!(gw.rerank("q", &[]).unwrap_err(), GatewayError::EmptyInput);
    }

    #[test]
    fn embed_scripted_vector() {
        let (_, gw) = mock_gateway(vec![ScriptEntry {
            pattern: "<|embed|>\nabc\n".into(),
            response: json!([0.6, 0.8]),
        }]);
        let v = gw.embed("abc").unwrap();
        assert_eq!(v, vec![0.6, 0.8]);
        assert!((cosine_similarity(&v, &gw.embed("abc").unwrap()).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(gw.embed("  ").unwrap_err(), GatewayError::EmptyInput);
    }

    #[test]
    fn blank_prompt_rejected_without_call() {
        let (_, gw) = mock_gateway(vec![]);
        assert_eq!(gw.generate(&user("   ")).unwrap_err(), GatewayError::EmptyInput);
        assert!(gw.call_log().is_empty());
    }

    struct Flaky {
        failures: Mutex<u32>,
        error: GatewayError,
    }

    impl Backend for Flaky {
        fn generate(&self, _: &Prompt, _: &GenerationConfig) -> Result<String, GatewayError> {
            let mut f = self.failures.lock().unwrap();
            if *f > 0 {
                *f -= 1;
                Err(self.error.clone())
            } else {
                Ok("ok".into())
            }
        }
        fn rerank(&self, _: &str, _: &[String]) -> Result<Vec<f64>, GatewayError> {
            unimplemented!()
        }
        fn embed(&self, _: &str) -> Result<Vec<f64>, GatewayError> {
            unimplemented!()
        }
    }

    fn flaky(failures: u32, error: GatewayError) -> Gateway {
        Gateway::new(
            Arc::new(Flaky {
                failures: Mutex::new(failures),
                error,
            }),
            GenerationConfig::default(),
            4,
        )
        .with_retry(RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::ZERO,
        })
    }

    #[test]
    fn retries_transient_failures() {
        let gw = flaky(2, GatewayError::RateLimited);
        assert_eq!(gw.generate(&user("x")).unwrap(), "ok");
        let attempts: Vec<_> = gw.call_log().iter().map(|r| r.attempt).collect();
        assert_eq!(attempts, vec![1, 2, 3]);
    }

    #[test]
    fn retry_budget_is_bounded() {
        let gw = flaky(10, GatewayError::RateLimited);
        assert_eq!(gw.generate(&user("x")).unwrap_err(), GatewayError::RateLimited);
        assert_eq!(gw.call_log().len(), 3);
    }

    #[test]
    fn auth_errors_are_not_retried() {
        let gw = flaky(10, GatewayError::Auth("HTTP 401".into()));
        assert!(matches!(gw.generate(&user("x")), Err(GatewayError::Auth(_))));
        assert_eq!(gw.call_log().len(), 1);
    }

    #[test]
    fn loopback_detection() {
        assert!(is_loopback("http://127.0.0.1:8080/v1"));
        assert!(is_loopback("http://localhost"));
        assert!(is_loopback("http://[::1]:9000"));
        assert!(!is_loopback("https://api.example.com/v1"));
    }

    #[test]
    fn parallelism_follows_backend() {
        let (_, gw) = mock_gateway(vec![]);
        assert_eq!(gw.parallelism(), 1);
        assert_eq!(flaky(0, GatewayError::Timeout).parallelism(), 4);
    }
}
