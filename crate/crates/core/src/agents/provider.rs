//! Chat-completion and embedding providers.
//!
//! The HTTP providers speak small JSON protocols:
//!
//! * chat: `{model, messages: [{role, content}], temperature}` answered by
//!   `{choices: [{message: {content}}]}`;
//! * sentence embeddings: `{text}` answered by `{vector}`;
//! * occurrence embeddings: `{sentence, focus_index, layer}` answered by
//!   `{vector}`.

use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use super::prompts::Prompt;

#[derive(Debug, Clone, thiserror::Error)]
pub enum ProviderError {
    #[error("provider not configured: {0}")]
    NotConfigured(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    Decode(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Transport(_) => true,
            ProviderError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub trait ChatProvider: Send + Sync {
    /// Identifies the model behind the provider; part of every cache key.
    fn fingerprint(&self) -> String;
    fn complete(&self, prompt: &Prompt) -> Result<String, ProviderError>;
}

pub trait SentenceEmbedder: Send + Sync {
    fn fingerprint(&self) -> String;
    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError>;
}

/// Contextual embedding of one token occurrence, as produced by the model
/// the dataset was extracted from.
pub trait OccurrenceEmbedder: Send + Sync {
    fn fingerprint(&self) -> String;
    fn embed(&self, tokens: &[String], focus_index: usize, layer: u32) -> Result<Vec<f64>, ProviderError>;
}

impl<T: ChatProvider + ?Sized> ChatProvider for Arc<T> {
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
    fn complete(&self, prompt: &Prompt) -> Result<String, ProviderError> {
        (**self).complete(prompt)
    }
}

impl<T: SentenceEmbedder + ?Sized> SentenceEmbedder for Arc<T> {
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        (**self).embed(text)
    }
}

impl<T: OccurrenceEmbedder + ?Sized> OccurrenceEmbedder for Arc<T> {
    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
    fn embed(&self, tokens: &[String], focus_index: usize, layer: u32) -> Result<Vec<f64>, ProviderError> {
        (**self).embed(tokens, focus_index, layer)
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct InFlightLimit {
    max: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a InFlightLimit);

impl InFlightLimit {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock();
        while *used >= self.max {
            self.freed.wait(&mut used);
        }
        *used += 1;
        Permit(self)
    }

    pub fn in_use(&self) -> usize {
        *self.used.lock()
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.used.lock() -= 1;
        self.0.freed.notify_one();
    }
}

/// Retry with exponential backoff plus an in-flight bound, shared by every
/// HTTP provider built from one [`ProviderConfig`].
#[derive(Debug)]
pub struct CallPolicy {
    pub attempts: usize,
    pub backoff: Duration,
    limit: InFlightLimit,
}

impl CallPolicy {
    pub fn new(attempts: usize, backoff: Duration, max_in_flight: usize) -> Self {
        Self {
            attempts: attempts.max(1),
            backoff,
            limit: InFlightLimit::new(max_in_flight),
        }
    }

    pub fn run<T>(&self, mut call: impl FnMut() -> Result<T, ProviderError>) -> Result<T, ProviderError> {
        let mut delay = self.backoff;
        let mut attempt = 1;
        loop {
            let result = {
                let _permit = self.limit.acquire();
                call()
            };
            match result {
                Err(e) if e.is_retryable() && attempt < self.attempts => {
                    log::warn!("provider call failed (attempt {attempt}/{}): {e}", self.attempts);
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

impl Default for CallPolicy {
    fn default() -> Self {
        Self::new(3, Duration::from_millis(500), 4)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub chat_url: Option<String>,
    pub chat_path: String,
    pub chat_model: String,
    pub chat_key: Option<String>,
    pub sentence_url: Option<String>,
    pub occurrence_url: Option<String>,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub attempts: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            chat_url: None,
            chat_path: "/v1/chat/completions".into(),
            chat_model: "gpt-4o".into(),
            chat_key: None,
            sentence_url: None,
            occurrence_url: None,
            timeout_secs: 60,
            max_in_flight: 4,
            attempts: 3,
        }
    }
}

impl ProviderConfig {
    /// Reads `EMBMAPPER_CHAT_URL`, `EMBMAPPER_CHAT_PATH`,
    /// `EMBMAPPER_CHAT_MODEL`, `EMBMAPPER_CHAT_KEY`,
    /// `EMBMAPPER_SENTENCE_EMBED_URL`, `EMBMAPPER_OCCURRENCE_EMBED_URL`,
    /// `EMBMAPPER_TIMEOUT_SECS`, `EMBMAPPER_MAX_IN_FLIGHT` and
    /// `EMBMAPPER_ATTEMPTS`.
    pub fn from_env() -> Self {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Self {
        let d = Self::default();
        let num = |k: &str, def: u64| get(k).and_then(|v| v.parse().ok()).unwrap_or(def);
        Self {
            chat_url: get("EMBMAPPER_CHAT_URL"),
            chat_path: get("EMBMAPPER_CHAT_PATH").unwrap_or(d.chat_path),
            chat_model: get("EMBMAPPER_CHAT_MODEL").unwrap_or(d.chat_model),
            chat_key: get("EMBMAPPER_CHAT_KEY"),
            sentence_url: get("EMBMAPPER_SENTENCE_EMBED_URL"),
            occurrence_url: get("EMBMAPPER_OCCURRENCE_EMBED_URL"),
            timeout_secs: num("EMBMAPPER_TIMEOUT_SECS", d.timeout_secs),
            max_in_flight: num("EMBMAPPER_MAX_IN_FLIGHT", d.max_in_flight as u64) as usize,
            attempts: num("EMBMAPPER_ATTEMPTS", d.attempts as u64) as usize,
        }
    }

    fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(self.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into()
    }

    fn policy(&self) -> Arc<CallPolicy> {
        Arc::new(CallPolicy::new(self.attempts, Duration::from_millis(500), self.max_in_flight))
    }

    pub fn chat(&self) -> Result<HttpChat, ProviderError> {
        let base = self
            .chat_url
            .clone()
            .ok_or_else(|| ProviderError::NotConfigured("EMBMAPPER_CHAT_URL".into()))?;
        Ok(HttpChat {
            url: join_url(&base, &self.chat_path),
            model: self.chat_model.clone(),
            key: self.chat_key.clone(),
            agent: self.agent(),
            policy: self.policy(),
        })
    }

    pub fn sentence_embedder(&self) -> Result<HttpSentenceEmbedder, ProviderError> {
        let url = self
            .sentence_url
            .clone()
            .ok_or_else(|| ProviderError::NotConfigured("EMBMAPPER_SENTENCE_EMBED_URL".into()))?;
        Ok(HttpSentenceEmbedder {
            url,
            agent: self.agent(),
            policy: self.policy(),
        })
    }

    pub fn occurrence_embedder(&self) -> Result<HttpOccurrenceEmbedder, ProviderError> {
        let url = self
            .occurrence_url
            .clone()
            .ok_or_else(|| ProviderError::NotConfigured("EMBMAPPER_OCCURRENCE_EMBED_URL".into()))?;
        Ok(HttpOccurrenceEmbedder {
            url,
            agent: self.agent(),
            policy: self.policy(),
        })
    }
}

fn join_url(base: &str, path: &str) -> String {
    if path.is_empty() {
        return base.to_string();
    }
    format!("{}/{}", base.trim_end_matches('/'), path.trim_start_matches('/'))
}

fn post_json<T: for<'de> Deserialize<'de>>(
    agent: &ureq::Agent,
    url: &str,
    key: Option<&str>,
    body: &impl Serialize,
) -> Result<T, ProviderError> {
    let mut req = agent.post(url);
    if let Some(key) = key {
        req = req.header("Authorization", &format!("Bearer {key}"));
    }
    let mut resp = req
        .send_json(body)
        .map_err(|e| ProviderError::Transport(e.to_string()))?;
    let status = resp.status().as_u16();
    if !(200..300).contains(&status) {
        let body = resp.body_mut().read_to_string().unwrap_or_default();
        return Err(ProviderError::Status { status, body });
    }
    resp.body_mut()
        .read_json::<T>()
        .map_err(|e| ProviderError::Decode(e.to_string()))
}

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatContent,
}

#[derive(Debug, Deserialize)]
struct ChatContent {
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct VectorResponse {
    vector: Vec<f64>,
}

pub struct HttpChat {
    url: String,
    model: String,
    key: Option<String>,
    agent: ureq::Agent,
    policy: Arc<CallPolicy>,
}

impl ChatProvider for HttpChat {
    fn fingerprint(&self) -> String {
        format!("http-chat:{}#{}", self.url, self.model)
    }

    fn complete(&self, prompt: &Prompt) -> Result<String, ProviderError> {
        let body = ChatRequest {
            model: &self.model,
            messages: vec![
                ChatMessage { role: "system", content: &prompt.system },
                ChatMessage { role: "user", content: &prompt.user },
            ],
            temperature: 0.0,
        };
        self.policy.run(|| {
            let resp: ChatResponse = post_json(&self.agent, &self.url, self.key.as_deref(), &body)?;
            resp.choices
                .into_iter()
                .next()
                .and_then(|c| c.message.content)
                .ok_or_else(|| ProviderError::Decode("response has no choices".into()))
        })
    }
}

pub struct HttpSentenceEmbedder {
    url: String,
    agent: ureq::Agent,
    policy: Arc<CallPolicy>,
}

impl SentenceEmbedder for HttpSentenceEmbedder {
    fn fingerprint(&self) -> String {
        format!("http-sentence:{}", self.url)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, ProviderError> {
        let body = serde_json::json!({ "text": text });
        self.policy
            .run(|| post_json::<VectorResponse>(&self.agent, &self.url, None, &body).map(|r| r.vector))
    }
}

pub struct HttpOccurrenceEmbedder {
    url: String,
    agent: ureq::Agent,
    policy: Arc<CallPolicy>,
}

impl OccurrenceEmbedder for HttpOccurrenceEmbedder {
    fn fingerprint(&self) -> String {
        format!("http-occurrence:{}", self.url)
    }

    fn embed(&self, tokens: &[String], focus_index: usize, layer: u32) -> Result<Vec<f64>, ProviderError> {
        let body = serde_json::json!({
            "sentence": tokens.join(" "),
            "focus_index": focus_index,
            "layer": layer,
        });
        self.policy
            .run(|| post_json::<VectorResponse>(&self.agent, &self.url, None, &body).map(|r| r.vector))
    }
}
