//! Chat-completion providers.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::LlmSettings;
use crate::retry::with_backoff;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("LLM endpoint is not configured (set LLM_API_URL or llm.url)")]
    NotConfigured,
    #[error("LLM transport error: {0}")]
    Transport(String),
    #[error("LLM endpoint rejected the credentials (HTTP {0})")]
    Auth(u16),
    #[error("LLM endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed LLM response: {0}")]
    Malformed(String),
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        match self {
            LlmError::Transport(_) => true,
            LlmError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f32>,
}

/// Wire body of a chat-completion call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    #[serde(flatten)]
    pub sampling: Sampling,
    /// Class the request is about; not sent over the wire.
    #[serde(skip)]
    pub class_name: String,
}

pub trait ChatProvider: Send + Sync {
    fn provider_id(&self) -> String;
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError>;
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChatMessage,
}

/// OpenAI-compatible `POST {messages, model, temperature?, top_p?}` endpoint.
pub struct HttpChatProvider {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
    model: String,
    max_retries: u32,
    backoff: Duration,
}

impl HttpChatProvider {
    pub fn from_settings(settings: &LlmSettings) -> Result<Self, LlmError> {
        let url = settings.url.clone().ok_or(LlmError::NotConfigured)?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(settings.timeout_secs))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(Self {
            client,
            url,
            api_key: settings.api_key.clone(),
            model: settings.model.clone(),
            max_retries: settings.max_retries,
            backoff: Duration::from_millis(settings.backoff_ms),
        })
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    fn send_once(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let mut builder = self.client.post(&self.url).json(request);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let body = response.text().map_err(|e| LlmError::Transport(e.to_string()))?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(LlmError::Auth(status)),
            _ => return Err(LlmError::Status { status, body }),
        }
        let parsed: CompletionResponse =
            serde_json::from_str(&body).map_err(|e| LlmError::Malformed(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| LlmError::Malformed("response has no choices".into()))
    }
}

impl ChatProvider for HttpChatProvider {
    fn provider_id(&self) -> String {
        format!("http:{}", self.model)
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let mut request = request.clone();
        request.model = self.model.clone();
        with_backoff(self.max_retries, self.backoff, LlmError::is_retryable, |_| {
            self.send_once(&request)
        })
    }
}

type Responder = dyn Fn(&ChatRequest) -> Result<String, LlmError> + Send + Sync;

/// Deterministic in-process provider for tests and offline runs.
#[derive(Clone)]
pub struct StubChatProvider {
    id: String,
    respond: Arc<Responder>,
}

impl StubChatProvider {
    pub fn new(
        id: impl Into<String>,
        respond: impl Fn(&ChatRequest) -> Result<String, LlmError> + Send + Sync + 'static,
    ) -> Self {
        Self { id: id.into(), respond: Arc::new(respond) }
    }

    /// Answers every request with `n` numbered prompts mentioning the class.
    pub fn numbered(n: usize) -> Self {
        Self::new("stub", move |req| {
            Ok((1..=n)
                .map(|i| format!("{i}. a detailed photograph of a {}, composition variant {i}", req.class_name))
                .collect::<Vec<_>>()
                .join("\n"))
        })
    }
}

impl ChatProvider for StubChatProvider {
    fn provider_id(&self) -> String {
        self.id.clone()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        (self.respond)(request)
    }
}
